"""Metrics, reference baselines, and the benchmark runner.

RMSE and MAE pool every predicted value: all stations, both channels, all
test intervals share one denominator z.  Per-channel numbers are reported
additionally but are not the headline.

The runner can evaluate the published method set on any ingested series and
prints the RMSE/MAE figures reported for STDI-Net's NYC 2014 evaluation next
to the reproduced ones.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import make_windows, split_dataset, generate_hour_embeddings, load_hour_embeddings, windows_to_arrays
from .errors import DataError, UsageError
from .layers import LinearLayer
from .model import MODEL_KINDS, ModelDims, build_model
from .tensor import Tensor, resolve_dtype
from .training import TrainConfig, fit, predict_windows

# RMSE/MAE reported for each method on the 2014 NYC Citi Bike benchmark,
# shown beside reproduced numbers.  The exact station selection and grid
# layout behind these figures are not recoverable, so they are context, not
# a tolerance target.
REFERENCE_RESULTS = {
    "HA": (10.7308, 5.8374),
    "Lasso": (8.4947, 3.6799),
    "Ridge": (8.4699, 3.6984),
    "MLP": (7.1888, 3.3388),
    "SpatialFC": (5.6558, 2.6218),
    "TemporalFC": (5.2614, 2.3914),
    "SpatialTemporalFC": (5.0832, 2.3476),
    "SpatialDI": (4.9077, 2.3457),
    "TemporalDI": (4.7788, 2.2582),
    "UnifiedSpatial": (6.1493, 2.9533),
    "STDIFusion": (4.8149, 2.2995),
    "STDIEmbedding": (4.6154, 2.1783),
    "STDI": (4.6339, 2.1946),
}

BASELINES = ("HA", "Lasso", "Ridge", "MLP")
ALL_METHODS = BASELINES + MODEL_KINDS

SUITES = {
    "table1": ["HA", "Lasso", "Ridge", "MLP", "STDI"],
    "table2": ["SpatialFC", "TemporalFC", "SpatialTemporalFC",
               "SpatialDI", "TemporalDI", "STDI"],
    "table3": ["UnifiedSpatial", "SpatialFC", "STDIFusion", "STDIEmbedding", "STDI"],
}
SUITES["all"] = SUITES["table1"] + [m for m in SUITES["table2"] + SUITES["table3"]
                                    if m not in SUITES["table1"]]
_seen = set()
SUITES["all"] = [m for m in SUITES["all"] if not (m in _seen or _seen.add(m))]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricPair:
    rmse: float
    mae: float
    z: int


def compute_metrics(preds, targets):
    """Pooled RMSE and MAE over every predicted value."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.size == 0:
        raise UsageError("compute_metrics: empty predictions")
    if preds.shape != targets.shape:
        raise UsageError(f"compute_metrics: shapes {preds.shape} vs {targets.shape}")
    err = preds - targets
    return MetricPair(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mae=float(np.mean(np.abs(err))),
        z=int(preds.size),
    )


def per_channel_metrics(preds, targets):
    """Supplementary rental/return breakdown of the pooled metrics."""
    out = {}
    for idx, name in ((0, "rental"), (1, "return")):
        out[name] = compute_metrics(preds[:, idx], targets[:, idx])
    return out


# ---------------------------------------------------------------------------
# historical average


def baseline_ha(series, test_windows, boundary_epoch, by_weekday=False):
    """Predict each (station, channel) by its training mean at that hour.

    Training intervals are those starting before ``boundary_epoch``; at
    least one full week of them is required.  Hours never seen in training
    predict zero.
    """
    train_idx = [t for t in range(series.length)
                 if series.start_epoch + t * series.interval_seconds < boundary_epoch]
    if len(train_idx) < 168:
        raise DataError(f"historical average needs a training week, got {len(train_idx)} intervals")

    def key_of(epoch):
        hour = (epoch // 3600) % 24
        if by_weekday:
            return (epoch // 86400) % 7, hour
        return hour

    sums = {}
    counts = {}
    for t in train_idx:
        key = key_of(series.start_epoch + t * series.interval_seconds)
        if key not in sums:
            sums[key] = np.zeros_like(series.values[0], dtype=np.float64)
            counts[key] = 0
        sums[key] += series.values[t]
        counts[key] += 1

    zero = np.zeros_like(series.values[0], dtype=np.float64)
    preds = []
    for w in test_windows:
        key = key_of(w.target_epoch)
        preds.append(sums[key] / counts[key] if key in counts else zero)
    return np.stack(preds)


# ---------------------------------------------------------------------------
# linear baselines


def _design(windows):
    inputs, _, targets = windows_to_arrays(windows)
    n = inputs.shape[0]
    return inputs.reshape(n, -1).astype(np.float64), targets.reshape(n, -1).astype(np.float64)


def ridge_closed_form(x, y, lam):
    """(X^T X + lam I)^-1 X^T y with an unpenalized intercept via centering."""
    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xc = x - x_mean
    yc = y - y_mean
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    weights = np.linalg.solve(gram, xc.T @ yc)
    intercept = y_mean - x_mean @ weights
    return weights, intercept


def lasso_coordinate_descent(x, y, alpha, tol=1e-6, max_sweeps=1000):
    """Cyclic coordinate descent for (1/2n)||y - Xb||^2 + alpha*||b||_1.

    The intercept is unpenalized (handled by centering).  Stops when no
    coefficient moved more than ``tol`` in a sweep.
    """
    n, f = x.shape
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    yc = y - y_mean
    gram = xc.T @ xc
    cty = xc.T @ yc
    diag = np.diag(gram).copy()
    beta = np.zeros(f)
    q = np.zeros(f)  # gram @ beta, maintained incrementally
    thresh = n * alpha
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(f):
            if diag[j] == 0.0:
                continue
            rho = cty[j] - q[j] + diag[j] * beta[j]
            new = np.sign(rho) * max(abs(rho) - thresh, 0.0) / diag[j]
            delta = new - beta[j]
            if delta != 0.0:
                q += gram[:, j] * delta
                beta[j] = new
                max_delta = max(max_delta, abs(delta))
        if max_delta < tol:
            break
    intercept = y_mean - x_mean @ beta
    return beta, intercept


@dataclass
class LinearBaseline:
    kind: str
    lam: float
    weights: np.ndarray
    intercept: np.ndarray

    def predict(self, windows):
        x, _ = _design(windows)
        flat = x @ self.weights + self.intercept
        n = flat.shape[0]
        shape = windows[0].target.shape
        return flat.reshape((n,) + shape)


def baseline_linear(train_windows, val_windows, kind, lambda_grid=(0.01, 0.1, 1.0, 10.0)):
    """Per-output ridge or lasso with the penalty chosen on validation RMSE."""
    if kind not in ("ridge", "lasso"):
        raise UsageError(f"linear baseline kind must be ridge or lasso, got {kind!r}")
    if any(lam <= 0 for lam in lambda_grid):
        raise UsageError("penalty grid must be strictly positive")
    x_train, y_train = _design(train_windows)
    x_val, y_val = _design(val_windows)

    best = None
    for lam in lambda_grid:
        if kind == "ridge":
            weights, intercept = ridge_closed_form(x_train, y_train, lam)
        else:
            cols = []
            intercepts = []
            for j in range(y_train.shape[1]):
                beta, b0 = lasso_coordinate_descent(x_train, y_train[:, j], lam)
                cols.append(beta)
                intercepts.append(b0)
            weights = np.stack(cols, axis=1)
            intercept = np.array(intercepts)
        val_pred = x_val @ weights + intercept
        rmse = float(np.sqrt(np.mean((val_pred - y_val) ** 2)))
        if best is None or rmse < best[0]:
            best = (rmse, lam, weights, intercept)
    _, lam, weights, intercept = best
    return LinearBaseline(kind=kind, lam=lam, weights=weights, intercept=intercept)


# ---------------------------------------------------------------------------
# MLP baseline

MLP_HIDDEN = (256, 256, 128, 128)


class MlpModel:
    """Four ReLU hidden layers over the flattened window; ReLU output.

    Implements the same protocol fit() drives (forward_batch, parameters,
    snapshot/restore), ignoring the hour label.
    """

    kind = "MLP"
    uses_hour = False

    def __init__(self, dims, seed, dtype=T.STANDARD):
        self.dims = dims
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        widths = [dims.seq_len * 2 * dims.rows * dims.cols, *MLP_HIDDEN, dims.output_dim]
        self.layers = [LinearLayer(widths[i], widths[i + 1], rng, dtype)
                       for i in range(len(widths) - 1)]

    def forward_batch(self, seqs, hours=None, mode="train"):
        batch = seqs.data.shape[0]
        h = T.reshape(seqs, (batch, self.layers[0].weight.data.shape[1]))
        for layer in self.layers:
            h = T.relu(layer.forward(h))
        return T.reshape(h, (batch, 2, self.dims.rows, self.dims.cols))

    def forward(self, seq, hour=None, mode="eval"):
        batched = self.forward_batch(T.reshape(seq, (1,) + seq.data.shape), None, mode)
        return T.reshape(batched, seq.data.shape[1:])

    def named_tensors(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"mlp{i}.{n}", p) for n, p in layer.params())
        return out

    def named_states(self):
        return []

    def parameters(self):
        return [p for _, p in self.named_tensors()]

    def parameter_count(self, trainable_only=True):
        return sum(p.data.size for p in self.parameters())

    def attach_tape(self, tape):
        for p in self.parameters():
            p.tape = tape

    def snapshot(self):
        return {n: p.data.copy() for n, p in self.named_tensors()}, {}

    def restore(self, snap):
        params, _ = snap
        for n, p in self.named_tensors():
            p.data[...] = params[n]


def baseline_mlp(dims, seed, dtype=T.STANDARD):
    return MlpModel(dims, seed, dtype)


# ---------------------------------------------------------------------------
# benchmark runner


@dataclass
class BenchConfig:
    dims: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    test_days: int = 10
    val_frac: float = 0.1
    lambda_grid: tuple = (0.01, 0.1, 1.0, 10.0)
    embeddings_path: str = ""   # empty: deterministic generated table

    def digest(self):
        payload = {
            "dims": asdict(self.dims),
            "train": self.train.__dict__,
            "test_days": self.test_days,
            "val_frac": self.val_frac,
            "lambda_grid": list(self.lambda_grid),
            "embeddings_path": self.embeddings_path,
        }
        raw = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:12]


@dataclass
class BenchRow:
    method: str
    metrics: MetricPair
    per_channel: dict
    reference: tuple | None
    config_digest: str
    seed: int
    runtime_s: float
    detail: dict = field(default_factory=dict)


@dataclass
class BenchReport:
    rows: list
    seed: int
    config_digest: str
    n_test: int


def _method_predictions(method, series, splits, config):
    train, val, test = splits
    seed = config.train.seed
    detail = {}
    if method == "HA":
        boundary = min(w.target_epoch for w in test)
        preds = baseline_ha(series, test, boundary)
    elif method in ("Ridge", "Lasso"):
        model = baseline_linear(train, val, method.lower(), config.lambda_grid)
        preds = model.predict(test)
        detail["lambda"] = model.lam
    elif method == "MLP":
        model = baseline_mlp(config.dims, seed, dtype=resolve_dtype(config.train.precision))
        model, history = fit(model, train, val, config.train)
        preds = predict_windows(model, test, scale=history.scale)
        detail["epochs_run"] = history.epochs_run
    elif method in MODEL_KINDS:
        if config.embeddings_path:
            table = load_hour_embeddings(config.embeddings_path, config.dims.embed_dim)
        else:
            table = generate_hour_embeddings(config.dims.embed_dim, seed)
        model = build_model(method, config.dims, seed=seed, embedding=table,
                            dtype=resolve_dtype(config.train.precision))
        model, history = fit(model, train, val, config.train)
        preds = predict_windows(model, test, scale=history.scale)
        detail["epochs_run"] = history.epochs_run
    else:
        raise UsageError(
            f"unknown method {method!r}; valid methods: {', '.join(ALL_METHODS)}"
        )
    return preds, detail


def run_benchmark(series, methods, config=None):
    """Train and evaluate each method on one shared chronological split."""
    config = config or BenchConfig()
    if len(set(methods)) != len(methods):
        raise UsageError("each method may be requested at most once")
    for method in methods:
        if method not in ALL_METHODS:
            raise UsageError(
                f"unknown method {method!r}; valid methods: {', '.join(ALL_METHODS)}"
            )
    windows = make_windows(series, config.dims.seq_len)
    splits = split_dataset(windows, test_days=config.test_days, val_frac=config.val_frac)
    _, _, test = splits
    _, _, test_targets = windows_to_arrays(test)
    test_targets = test_targets.astype(np.float64)

    digest = config.digest()
    rows = []
    for method in methods:
        started = time.perf_counter()
        preds, detail = _method_predictions(method, series, splits, config)
        runtime = time.perf_counter() - started
        metrics = compute_metrics(preds, test_targets)
        rows.append(BenchRow(
            method=method,
            metrics=metrics,
            per_channel={k: asdict(v) for k, v in per_channel_metrics(preds, test_targets).items()},
            reference=REFERENCE_RESULTS.get(method),
            config_digest=digest,
            seed=config.train.seed,
            runtime_s=runtime,
            detail=detail,
        ))
    return BenchReport(rows=rows, seed=config.train.seed, config_digest=digest,
                       n_test=len(test))


# ---------------------------------------------------------------------------
# report output


def render_table(report):
    """Aligned text table with the published reference numbers beside ours."""
    header = f"{'method':<18} {'rmse':>10} {'mae':>10} {'ref_rmse':>10} {'ref_mae':>10} {'runtime_s':>10}"
    lines = [header, "-" * len(header)]
    for row in report.rows:
        ref_rmse = f"{row.reference[0]:.4f}" if row.reference else "-"
        ref_mae = f"{row.reference[1]:.4f}" if row.reference else "-"
        lines.append(
            f"{row.method:<18} {row.metrics.rmse:>10.4f} {row.metrics.mae:>10.4f} "
            f"{ref_rmse:>10} {ref_mae:>10} {row.runtime_s:>10.1f}"
        )
    lines.append(f"test windows: {report.n_test}  seed: {report.seed}  config: {report.config_digest}")
    return "\n".join(lines)


def write_csv(report, path):
    """Deterministic results CSV; wall-clock runtime stays in the manifest."""
    lines = ["method,rmse,mae,z,seed,config_digest,runtime_s"]
    for row in report.rows:
        lines.append(
            f"{row.method},{row.metrics.rmse:.6f},{row.metrics.mae:.6f},"
            f"{row.metrics.z},{row.seed},{row.config_digest},"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def report_json(report):
    return {
        "seed": report.seed,
        "config_digest": report.config_digest,
        "n_test": report.n_test,
        "rows": [
            {
                "method": row.method,
                "rmse": row.metrics.rmse,
                "mae": row.metrics.mae,
                "z": row.metrics.z,
                "per_channel": row.per_channel,
                "reference_rmse": row.reference[0] if row.reference else None,
                "reference_mae": row.reference[1] if row.reference else None,
                "detail": row.detail,
            }
            for row in report.rows
        ],
    }


def write_json(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_json(report), fh, indent=1, sort_keys=True)
        fh.write("\n")
