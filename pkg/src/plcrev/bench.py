"""Analysis time versus binary size, with a least-squares linear fit."""

import csv
import random
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

from . import forge
from .analysis import analyze
from .binfmt import parse_prg
from .knowledge import WAGO_750_881

DEFAULT_SIZES = (50, 250, 500, 750, 1000, 1250, 1500, 1750, 2000)


@dataclass
class Sample:
    size_kb: int
    size: int
    subroutines: int
    edges: int
    seconds: float


@dataclass
class Fit:
    slope: float  # seconds per byte
    intercept: float
    r2: float


def measure(data: bytes, iomap=WAGO_750_881) -> tuple:
    t0 = time.perf_counter()
    result = analyze(parse_prg(data), iomap)
    return time.perf_counter() - t0, result


def run(sizes=DEFAULT_SIZES, seed: int = 0, progress=None) -> list:
    rng = random.Random(seed)
    out = []
    for kb in sizes:
        spec = forge.random_spec(random.Random(rng.getrandbits(64)), kb, f"bench_{kb}")
        data, _, _ = forge.generate(spec)
        seconds, result = measure(data)
        s = Sample(kb, len(data), len(result.binary.subroutines), len(result.graph.edges), seconds)
        if progress:
            progress(s)
        out.append(s)
    return out


def fit(samples) -> Fit:
    xs = [s.size for s in samples]
    ys = [s.seconds for s in samples]
    slope, intercept = statistics.linear_regression(xs, ys)
    mean = statistics.fmean(ys)
    ss_tot = sum((y - mean) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    return Fit(slope, intercept, 1.0 - ss_res / ss_tot if ss_tot else 1.0)


def write_csv(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size_kb", "size_bytes", "subroutines", "edges", "seconds"])
        for s in samples:
            w.writerow([s.size_kb, s.size, s.subroutines, s.edges, f"{s.seconds:.6f}"])


def plot(samples, path, line: Fit = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    line = line or fit(samples)
    kb = [s.size / 1024 for s in samples]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(kb, [s.seconds for s in samples], "o", label="measured")
    lo, hi = min(s.size for s in samples), max(s.size for s in samples)
    ax.plot([lo / 1024, hi / 1024], [line.slope * lo + line.intercept, line.slope * hi + line.intercept],
            "-", label=f"linear fit, R² = {line.r2:.3f}")
    ax.set_xlabel("binary size (KB)")
    ax.set_ylabel("analysis time (s)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report(samples, outdir) -> tuple:
    """Write timing.csv and timing.png; returns (csv path, png path, fit)."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    line = fit(samples)
    write_csv(samples, out / "timing.csv")
    plot(samples, out / "timing.png", line)
    return out / "timing.csv", out / "timing.png", line
