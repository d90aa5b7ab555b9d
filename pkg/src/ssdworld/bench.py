"""Training-step time and peak memory of the sequence backbone versus length."""
from __future__ import annotations

import csv
import logging
import statistics
import time
from pathlib import Path

import numpy as np
import torch

from . import gridworld as gw
from .config import RunConfig
from .ssd import MaterializationError
from .world_model import TokenWorldModel

log = logging.getLogger(__name__)


def peak_bytes(fn) -> int:
    """Peak of live CPU allocator bytes made while running ``fn`` (allocations minus frees)."""
    from torch.profiler import ProfilerActivity, profile

    with profile(activities=[ProfilerActivity.CPU], profile_memory=True) as prof:
        fn()
    events = [e for e in prof.profiler.kineto_results.events() if e.name() == "[memory]"]
    events.sort(key=lambda e: e.start_ns())
    live = peak = 0
    for e in events:
        live += e.nbytes()
        peak = max(peak, live)
    return peak


def fit_exponent(lengths, values) -> float:
    """Slope of log(value) against log(length), by least squares."""
    return float(np.polyfit(np.log(lengths), np.log(values), 1)[0])


def _model(cfg: RunConfig, mode: str) -> TokenWorldModel:
    wcfg = cfg.replace(mode=mode, dropout=0.0).world_model()
    return TokenWorldModel(len(gw.VOCAB), wcfg)


def bench_point(model: TokenWorldModel, tokens: torch.Tensor, mode: str, warmup: int,
                repeats: int, max_seconds: float = 20.0) -> tuple[float, int]:
    """(median ms per forward+backward step, peak bytes) for one (mode, length)."""
    ssd_mode = "chunked" if mode == "gru" else mode

    def train_step():
        model.zero_grad(set_to_none=True)
        loss, _ = model.loss(tokens, ssd_mode)
        loss.backward()

    for _ in range(warmup):
        train_step()
    times, start = [], time.perf_counter()
    for _ in range(repeats):
        t0 = time.perf_counter()
        train_step()
        times.append(1000 * (time.perf_counter() - t0))
        # slow points stop early once enough samples exist
        if len(times) >= 3 and time.perf_counter() - start > max_seconds:
            break
    return statistics.median(times), peak_bytes(train_step)


def bench_scaling(cfg: RunConfig, out_dir=None, max_seconds_per_point: float = 20.0) -> dict:
    """Measure every (mode, length) pair and fit log-log exponents per mode.

    Returns {"rows": [...], "exponents": {mode: {"time": e, "memory": e}}, "params": {...}}.
    Points that run out of memory (or refuse to materialise) are reported as OOM.
    """
    torch.set_num_threads(cfg.threads)
    lengths = [int(s) for s in cfg.bench_lengths.split(",")]
    modes = [s.strip() for s in cfg.bench_modes.split(",")]
    rng = np.random.default_rng(cfg.seed)
    lf = gw.frame_length(cfg.grid_size)
    rows, params = [], {}
    for mode in modes:
        torch.manual_seed(cfg.seed)
        model = _model(cfg, mode)
        params[mode] = sum(p.numel() for p in model.parameters())
        for l in lengths:
            frames = -(-l // lf)
            tokens = torch.from_numpy(gw.batch_tokens(cfg.grid_size, frames, cfg.bench_batch, rng)[:, :l])
            try:
                ms, peak = bench_point(model, tokens, mode, cfg.bench_warmup, cfg.bench_repeats,
                                       max_seconds_per_point)
                status = "ok"
            except (MemoryError, MaterializationError, RuntimeError) as err:
                if isinstance(err, RuntimeError) and "memory" not in str(err).lower():
                    raise
                ms, peak, status = float("nan"), 0, "OOM"
            log.info("bench %s l=%d: %.2f ms, %.1f MB (%s)", mode, l, ms, peak / 2**20, status)
            rows.append({"mode": mode, "seq_len": l, "ms_per_step": ms, "peak_bytes": peak,
                         "params": params[mode], "status": status})
    exponents = {}
    for mode in modes:
        ok = [r for r in rows if r["mode"] == mode and r["status"] == "ok"]
        if len(ok) >= 2:
            ls = [r["seq_len"] for r in ok]
            exponents[mode] = {"time": fit_exponent(ls, [r["ms_per_step"] for r in ok]),
                               "memory": fit_exponent(ls, [r["peak_bytes"] for r in ok])}
    if out_dir is not None:
        write_bench(Path(out_dir), cfg, rows, exponents)
    return {"rows": rows, "exponents": exponents, "params": params}


def write_bench(out: Path, cfg: RunConfig, rows: list[dict], exponents: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cols = ["mode", "seq_len", "ms_per_step", "peak_bytes", "params", "status", "config_hash"]
    with open(out / "scaling.csv", "w", newline="") as fh:
        for line in cfg.to_text().splitlines():
            fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "config_hash": cfg.hash()})
    with open(out / "exponents.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "time_exponent", "memory_exponent"])
        for mode, e in exponents.items():
            w.writerow([mode, f"{e['time']:.4f}", f"{e['memory']:.4f}"])
