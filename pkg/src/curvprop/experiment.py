"""Accuracy-experiment harness and command line entry point.

Measures how close each stochastic diagonal estimator gets to the exact
Hessian diagonal of a feed-forward network on a fixed synthetic batch,
as the number of probe vectors per data case grows. Results land in a
CSV file plus a log-log SVG plot. Configuration is a plain
``key=value`` text file ('#' comments allowed) with per-key overrides on
the command line; a fixed seed makes the whole run reproducible.

The exact diagonal comes from one Hessian-vector product per parameter
against basis vectors on the graph form of the network, cached on disk
keyed by a content hash of the weights and data.

Instead of a network, a graph description file (``graph=...``) can be
measured; the generic estimators then run against the dense oracle.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .estimators import EstimatorConfig, estimate
from .exact import HessianOperator, exact_hessian
from .graphio import load_graph
from .mlp import (
    becker_lecun_diagonal,
    diagonal_samples,
    init_mlp,
    load_checkpoint,
    mlp_as_graph,
    mlp_objective_and_gradient,
    train_sgd,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ResultRow",
    "parse_config_text",
    "run_accuracy_experiment",
    "emit_outputs",
    "main",
]

DEFAULT_ESTIMATORS = (
    "s-binary",
    "s-gaussian",
    "tu-binary",
    "tu-gaussian",
    "simple-gaussian",
    "becker-lecun",
)

_NOISE_BY_TAG = {"binary": "rademacher", "gaussian": "gaussian"}
_METRICS = ("rel_l2", "sq_rel_l2")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    layers: tuple = (256, 20, 20, 20, 10)
    activation: str = "tanh"
    init_std: float = 0.1
    checkpoint: str = ""
    cases: int = 1000
    estimators: tuple = DEFAULT_ESTIMATORS
    sample_sizes: tuple = (1, 10, 100)
    metric: str = "rel_l2"
    seed: int = 0
    threads: int = 1
    trained: bool = False
    train_epochs: int = 50
    out: str = "results"
    graph: str = ""
    graph_input: tuple = ()
    cache: bool = True

    def validate(self):
        if not self.estimators:
            raise ConfigError("need at least one estimator")
        sizes = tuple(self.sample_sizes)
        if any(s < 1 for s in sizes) or any(
            b <= a for a, b in zip(sizes, sizes[1:])
        ):
            raise ConfigError("sample sizes must be positive and strictly increasing")
        if len(self.layers) < 2 or any(s < 1 for s in self.layers):
            raise ConfigError("layers must list at least input and output sizes")
        if self.metric not in _METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; known: {_METRICS}")
        if self.cases < 1:
            raise ConfigError("need at least one data case")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        for name in self.estimators:
            _split_estimator(name, graph_mode=bool(self.graph))


@dataclass
class ResultRow:
    """One cell of the experiment: estimator, noise, probes per case."""

    estimator: str
    noise: str
    samples: int
    metric: float
    seconds: float
    seed: int


def _split_estimator(name, graph_mode=False):
    if name == "becker-lecun":
        if graph_mode:
            raise ConfigError(
                "becker-lecun needs a layered network; not available in graph mode"
            )
        return "becker-lecun", "none"
    if "-" not in name:
        raise ConfigError(
            f"estimator {name!r} should look like 's-binary' or 'becker-lecun'"
        )
    base, tag = name.rsplit("-", 1)
    if base not in ("s", "tu", "simple") or tag not in _NOISE_BY_TAG:
        raise ConfigError(f"unknown estimator {name!r}")
    return base, tag


def _cell_seed(seed, name):
    # stable per-cell stream: independent of estimator order in the config
    return (int(seed), zlib.crc32(name.encode()))


def _metric_value(kind, est, exact):
    rel = float(np.linalg.norm(est - exact) / np.linalg.norm(exact))
    return rel * rel if kind == "sq_rel_l2" else rel


# ---------------------------------------------------------------------------
# exact diagonal with on-disk cache
# ---------------------------------------------------------------------------

def _net_fingerprint(mlp, x, t):
    h = hashlib.sha256()
    h.update(repr((mlp.sizes, mlp.activation)).encode())
    for w in mlp.weights:
        h.update(np.ascontiguousarray(w).tobytes())
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()[:16]


def exact_diagonal(mlp, x, t, threads=1, cache_dir=None, block=32):
    """Exact Hessian diagonal via one basis product per parameter."""
    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(
            cache_dir, f"exact-diag-{_net_fingerprint(mlp, x, t)}.npy"
        )
        if os.path.exists(path):
            return np.load(path)
    graph = mlp_as_graph(mlp, x, t)
    op = HessianOperator(graph, mlp.flat_params())
    n = op.n
    diag = np.empty(n)

    def run_block(start):
        stop = min(start + block, n)
        basis = np.zeros((n, stop - start))
        basis[np.arange(start, stop), np.arange(stop - start)] = 1.0
        cols = op.matvec(basis)
        diag[start:stop] = cols[np.arange(start, stop), np.arange(stop - start)]

    starts = range(0, n, block)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_block, starts))
    else:
        for s in starts:
            run_block(s)
    if path:
        np.save(path, diag)
    return diag


# ---------------------------------------------------------------------------
# experiment proper
# ---------------------------------------------------------------------------

def _synthetic_data(config):
    rng = np.random.default_rng(
        np.random.SeedSequence(_cell_seed(config.seed, "data"))
    )
    n_in, n_out = config.layers[0], config.layers[-1]
    x = rng.standard_normal((n_in, config.cases))
    t = np.zeros((n_out, config.cases))
    t[rng.integers(0, n_out, size=config.cases), np.arange(config.cases)] = 1.0
    return x, t


def _build_network(config):
    if config.checkpoint:
        mlp = load_checkpoint(config.checkpoint)
        if tuple(mlp.sizes) != tuple(config.layers):
            raise ConfigError(
                f"checkpoint layers {mlp.sizes} do not match configured "
                f"{tuple(config.layers)}"
            )
        return mlp
    rng = np.random.default_rng(
        np.random.SeedSequence(_cell_seed(config.seed, "init"))
    )
    return init_mlp(
        config.layers, rng, weight_std=config.init_std,
        activation=config.activation,
    )


def _mlp_cell(config, mlp, x, t, exact, name):
    base, tag = _split_estimator(name)
    seed = _cell_seed(config.seed, name)
    rows = []
    if base == "becker-lecun":
        t0 = time.perf_counter()
        est = becker_lecun_diagonal(mlp, x, t)
        elapsed = time.perf_counter() - t0
        rows.append(ResultRow(
            estimator=base, noise="none", samples=0,
            metric=_metric_value(config.metric, est.diag, exact),
            seconds=elapsed, seed=config.seed,
        ))
        return rows

    dist = _NOISE_BY_TAG[tag]
    top = max(config.sample_sizes)
    t0 = time.perf_counter()
    _, _, tape = mlp_objective_and_gradient(mlp, x, t)
    draws = diagonal_samples(mlp, x, t, base, dist, seed, top, tape=tape)
    elapsed = time.perf_counter() - t0
    running = np.zeros_like(exact)
    done = 0
    for size in config.sample_sizes:
        while done < size:
            running += draws[done]
            done += 1
        rows.append(ResultRow(
            estimator=base, noise=tag, samples=size,
            metric=_metric_value(config.metric, running / done, exact),
            seconds=elapsed * done / top, seed=config.seed,
        ))
    return rows


def _graph_cell(config, graph, point, exact, name):
    base, tag = _split_estimator(name, graph_mode=True)
    dist = _NOISE_BY_TAG[tag]
    seed_entropy = _cell_seed(config.seed, name)
    rows = []
    for size in config.sample_sizes:
        cfg = EstimatorConfig(
            estimator=base, noise=dist, samples=size, target="diagonal",
            seed=seed_entropy,
        )
        t0 = time.perf_counter()
        result = estimate(graph, point, cfg)
        elapsed = time.perf_counter() - t0
        rows.append(ResultRow(
            estimator=base, noise=tag, samples=size,
            metric=_metric_value(config.metric, result.value, exact),
            seconds=elapsed, seed=config.seed,
        ))
    return rows


def run_accuracy_experiment(config):
    """All (estimator, noise, sample size) cells of one configuration.

    Deterministic given the seed: each cell draws from its own stream and
    sample prefixes are shared across sizes, so neither the estimator
    order nor the thread count changes any row.
    """
    config.validate()

    if config.graph:
        graph = load_graph(config.graph)
        n = graph.nodes[graph.source].n
        if config.graph_input:
            point = np.asarray(config.graph_input, dtype=float)
            if point.shape != (n,):
                raise ConfigError(
                    f"graph_input has {point.shape[0]} entries, the graph "
                    f"expects {n}"
                )
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence(_cell_seed(config.seed, "graph-input"))
            )
            point = rng.standard_normal(n)
        exact = np.diag(exact_hessian(graph, point))
        cell = lambda name: _graph_cell(config, graph, point, exact, name)
    else:
        x, t = _synthetic_data(config)
        mlp = _build_network(config)
        if config.trained:
            rng = np.random.default_rng(
                np.random.SeedSequence(_cell_seed(config.seed, "train"))
            )
            mlp = train_sgd(mlp, x, t, epochs=config.train_epochs, rng=rng)
        cache_dir = os.path.join(config.out, "cache") if config.cache else None
        exact = exact_diagonal(mlp, x, t, threads=config.threads,
                               cache_dir=cache_dir)
        cell = lambda name: _mlp_cell(config, mlp, x, t, exact, name)

    names = list(config.estimators)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            per_cell = list(pool.map(cell, names))
    else:
        per_cell = [cell(name) for name in names]
    rows = [row for rows_ in per_cell for row in rows_]
    return rows


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def emit_outputs(rows, outdir, include_timing=False):
    """Write ``results.csv`` and ``accuracy.svg``; returns their paths.

    The CSV uses round-trip float formatting, UTF-8, LF endings. The
    seconds column is written as 0.0 unless ``include_timing`` is set,
    keeping reruns of the same seed byte-identical regardless of wall
    time or thread count.
    """
    if not rows:
        raise ValueError("no result rows to write")
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, "results.csv")
    lines = ["estimator,noise,samples,metric,seconds,seed"]
    for r in rows:
        seconds = repr(float(r.seconds)) if include_timing else "0.0"
        lines.append(
            f"{r.estimator},{r.noise},{r.samples},{repr(float(r.metric))},"
            f"{seconds},{r.seed}"
        )
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")

    svg_path = os.path.join(outdir, "accuracy.svg")
    with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_render_svg(rows))
    return csv_path, svg_path


_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd",
    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
)


def _render_svg(rows):
    """Log-log error-versus-samples plot, one polyline per series."""
    series = {}
    for r in rows:
        series.setdefault((r.estimator, r.noise), []).append(r)
    all_sizes = sorted({r.samples for r in rows if r.samples > 0}) or [1]
    metrics = [max(r.metric, 1e-300) for r in rows]

    width, height = 720, 480
    left, right, top, bottom = 70, 200, 30, 50
    x0, x1 = np.log10(min(all_sizes)), np.log10(max(all_sizes))
    if x1 <= x0:
        x1 = x0 + 1.0
    y0 = np.floor(np.log10(min(metrics)))
    y1 = np.ceil(np.log10(max(metrics)))
    if y1 <= y0:
        y1 = y0 + 1.0

    def px(logx):
        return left + (logx - x0) / (x1 - x0) * (width - left - right)

    def py(logy):
        return height - bottom - (logy - y0) / (y1 - y0) * (height - top - bottom)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" '
        f'y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" '
        f'stroke="black"/>',
        f'<text x="{(left + width - right) / 2:.2f}" y="{height - 12}" '
        f'text-anchor="middle" font-size="13">probe vectors per case</text>',
        f'<text x="18" y="{(top + height - bottom) / 2:.2f}" font-size="13" '
        f'text-anchor="middle" transform="rotate(-90 18 '
        f'{(top + height - bottom) / 2:.2f})">error</text>',
    ]
    for s in all_sizes:
        x = px(np.log10(s))
        out.append(
            f'<text x="{x:.2f}" y="{height - bottom + 18}" '
            f'text-anchor="middle" font-size="11">{s}</text>'
        )
    decade = int(y0)
    while decade <= int(y1):
        y = py(decade)
        out.append(
            f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-size="11">1e{decade}</text>'
        )
        out.append(
            f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" '
            f'stroke="black"/>'
        )
        decade += 1

    for idx, (key, srows) in enumerate(sorted(series.items())):
        color = _PALETTE[idx % len(_PALETTE)]
        srows = sorted(srows, key=lambda r: r.samples)
        if len(srows) == 1 and srows[0].samples == 0:
            # deterministic baseline: a flat line across the sample range
            logm = np.log10(max(srows[0].metric, 1e-300))
            pts = [(px(x0), py(logm)), (px(x1), py(logm))]
        else:
            pts = [
                (px(np.log10(r.samples)), py(np.log10(max(r.metric, 1e-300))))
                for r in srows
            ]
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        out.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.8" '
            f'points="{points}"/>'
        )
        label = key[0] if key[1] == "none" else f"{key[0]}-{key[1]}"
        ly = top + 16 + 16 * idx
        out.append(
            f'<line x1="{width - right + 14}" y1="{ly - 4}" '
            f'x2="{width - right + 38}" y2="{ly - 4}" stroke="{color}" '
            f'stroke-width="1.8"/>'
        )
        out.append(
            f'<text x="{width - right + 44}" y="{ly}" '
            f'font-size="12">{label}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# configuration parsing and the command line
# ---------------------------------------------------------------------------

_INT_KEYS = {"cases", "seed", "threads", "train_epochs"}
_FLOAT_KEYS = {"init_std"}
_BOOL_KEYS = {"trained", "cache"}
_INT_TUPLE_KEYS = {"layers", "sample_sizes"}
_STR_TUPLE_KEYS = {"estimators"}
_FLOAT_TUPLE_KEYS = {"graph_input"}


def _coerce(key, value, where):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if key in _INT_TUPLE_KEYS:
            return tuple(int(v) for v in value.split(",") if v)
        if key in _FLOAT_TUPLE_KEYS:
            return tuple(float(v) for v in value.split(",") if v)
        if key in _STR_TUPLE_KEYS:
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return value
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key}={value!r}") from None


def parse_config_text(text, config=None):
    """Apply ``key=value`` lines to a config; errors carry line numbers."""
    config = config or ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(config, key, _coerce(key, value, f"line {lineno}"))
    return config


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="curvprop-experiment",
        description="Compare stochastic Hessian-diagonal estimators against "
        "the exact diagonal on a seeded synthetic problem.",
    )
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--seed", type=int, help="override the seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--threads", type=int, help="worker thread count")
    parser.add_argument(
        "--timing", action="store_true",
        help="write measured wall times to the CSV (breaks byte-level "
        "reproducibility of reruns)",
    )
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any configuration key (repeatable)",
    )
    args = parser.parse_args(argv)

    try:
        config = ExperimentConfig()
        if args.config:
            try:
                with open(args.config, "r", encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from None
            config = parse_config_text(text, config)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            if key not in {f.name for f in fields(ExperimentConfig)}:
                raise ConfigError(f"--set: unknown key {key!r}")
            setattr(config, key, _coerce(key, value, "--set"))
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.out = args.out
        if args.threads is not None:
            config.threads = args.threads
        config.validate()
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    rows = run_accuracy_experiment(config)
    csv_path, svg_path = emit_outputs(rows, config.out, include_timing=args.timing)
    for r in rows:
        print(
            f"{r.estimator:>12s} {r.noise:>8s} samples={r.samples:<4d} "
            f"{config.metric}={r.metric:.6g} ({r.seconds:.2f}s)"
        )
    print(f"wrote {csv_path} and {svg_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
