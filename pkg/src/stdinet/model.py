"""Model assembly: spatial blocks, temporal encoder, prediction heads.

Nine model kinds share three feature paths and three heads:

==================  =========================  =======================
kind                feature path               prediction head
==================  =========================  =======================
STDI                per-index conv -> LSTM     hour-generated weights
SpatialFC           per-index conv -> concat   static linear
TemporalFC          raw frames -> LSTM         static linear
SpatialTemporalFC   per-index conv -> LSTM     static linear
SpatialDI           per-index conv -> concat   hour-generated weights
TemporalDI          raw frames -> LSTM         hour-generated weights
STDIFusion          per-index conv -> LSTM     hour feature concat + FC
UnifiedSpatial      shared conv -> concat      static linear
STDIEmbedding       per-index conv -> LSTM     hour-generated weights,
                                               trainable hour table
==================  =========================  =======================

The hour-generated head builds its weight matrix as
``W = O' @ diag(w(V)) @ O`` from the hour embedding V, so the per-hour
parameters stay low-rank, and the generated bias is a second small linear
map of V.  Every head finishes with ReLU, so predictions are nonnegative.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import generate_hour_embeddings
from .errors import DataError, DomainError, ShapeError, UsageError
from .layers import ConvBlock, LinearLayer, LstmParams, lstm_sequence, lstm_sequence_batch
from .tensor import Tensor

HOURS = 24
LEAKY_SLOPE = 0.01

MODEL_KINDS = (
    "STDI",
    "SpatialFC",
    "TemporalFC",
    "SpatialTemporalFC",
    "SpatialDI",
    "TemporalDI",
    "STDIFusion",
    "UnifiedSpatial",
    "STDIEmbedding",
)

_FEATURE_PATH = {
    "STDI": "spatial_lstm",
    "SpatialFC": "spatial_concat",
    "TemporalFC": "raw_lstm",
    "SpatialTemporalFC": "spatial_lstm",
    "SpatialDI": "spatial_concat",
    "TemporalDI": "raw_lstm",
    "STDIFusion": "spatial_lstm",
    "UnifiedSpatial": "shared_concat",
    "STDIEmbedding": "spatial_lstm",
}

_HEAD = {
    "STDI": "hyper",
    "SpatialFC": "static",
    "TemporalFC": "static",
    "SpatialTemporalFC": "static",
    "SpatialDI": "hyper",
    "TemporalDI": "hyper",
    "STDIFusion": "fusion",
    "UnifiedSpatial": "static",
    "STDIEmbedding": "hyper",
}


@dataclass(frozen=True)
class ModelDims:
    """Shape configuration shared by all model kinds."""

    rows: int = 8
    cols: int = 16
    seq_len: int = 3
    channels: int = 32        # conv block output channels
    lstm_hidden: int = 1024
    rank: int = 64            # factorization rank of the generated weights
    embed_dim: int = 50       # hour embedding width
    fusion_dim: int = 128     # hour feature width for the fusion variant

    @property
    def cells(self):
        return self.rows * self.cols

    @property
    def output_dim(self):
        return 2 * self.rows * self.cols

    @property
    def frame_dim(self):
        return 2 * self.rows * self.cols

    @property
    def spatial_dim(self):
        return self.channels * self.rows * self.cols


TOY_DIMS = ModelDims(rows=2, cols=2, seq_len=3, channels=4, lstm_hidden=8,
                     rank=4, embed_dim=6, fusion_dim=8)


class SpatialModule:
    """L convolutional blocks, one per sequence index (or one shared)."""

    def __init__(self, dims, rng, dtype=T.STANDARD, shared=False):
        self.dims = dims
        self.shared = shared
        count = 1 if shared else dims.seq_len
        self.blocks = [ConvBlock(dims.channels, rng, dtype) for _ in range(count)]

    def block_for(self, index):
        return self.blocks[0] if self.shared else self.blocks[index]

    def forward(self, seq, mode):
        """(L, 2, i, j) -> (L, channels*i*j), block l applied to frame l."""
        if seq.data.ndim != 4 or seq.data.shape[0] != self.dims.seq_len:
            raise ShapeError(
                f"spatial module expects ({self.dims.seq_len}, 2, i, j), got {seq.data.shape}"
            )
        feats = []
        for l in range(self.dims.seq_len):
            conv = self.block_for(l).forward(T.take(seq, l), mode)
            feats.append(T.flatten(conv))
        return T.stack(feats)

    def forward_batch(self, seqs, mode):
        """(B, L, 2, i, j) -> list of L tensors (B, channels*i*j)."""
        batch = seqs.data.shape[0]
        feats = []
        for l in range(self.dims.seq_len):
            conv = self.block_for(l).forward(T.take(seqs, l, axis=1), mode)
            feats.append(T.reshape(conv, (batch, self.dims.spatial_dim)))
        return feats

    def params(self):
        out = []
        for i, block in enumerate(self.blocks):
            tag = "shared" if self.shared else f"block{i}"
            out.extend((f"{tag}.{n}", p) for n, p in block.params())
        return out

    def states(self):
        out = []
        for i, block in enumerate(self.blocks):
            tag = "shared" if self.shared else f"block{i}"
            out.extend((f"{tag}.{n}", s) for n, s in block.states())
        return out


def spatial_forward(module, seq, mode="eval"):
    return module.forward(seq, mode)


class IntervalNet:
    """Generates the prediction layer's weights and biases from the hour.

    The 24 x h hour table is frozen unless ``trainable_embedding`` is set;
    the two small linear maps (h -> rank and h -> output) and the projection
    matrices O (rank x feature) and O' (output x rank) are always trainable.
    """

    def __init__(self, feat_dim, dims, rng, embedding, trainable_embedding=False,
                 dtype=T.STANDARD):
        if embedding.shape != (HOURS, dims.embed_dim):
            raise ShapeError(
                f"hour table must be ({HOURS}, {dims.embed_dim}), got {embedding.shape}"
            )
        self.feat_dim = feat_dim
        self.dims = dims
        self.embedding = Tensor(np.asarray(embedding, dtype=dtype).copy(),
                                requires_grad=trainable_embedding)
        self.lin_w = LinearLayer(dims.embed_dim, dims.rank, rng, dtype)
        self.lin_b = LinearLayer(dims.embed_dim, dims.output_dim, rng, dtype)
        self.o_mat = Tensor(
            (rng.uniform(-1, 1, size=(dims.rank, feat_dim)) / np.sqrt(feat_dim)).astype(dtype),
            requires_grad=True,
        )
        self.o_prime = Tensor(
            (rng.uniform(-1, 1, size=(dims.output_dim, dims.rank)) / np.sqrt(dims.rank)).astype(dtype),
            requires_grad=True,
        )

    def generate(self, hour):
        """Weights (k, feat) and bias (k,) for one hour, kept on the tape."""
        hour = int(hour)
        if not 0 <= hour < HOURS:
            raise DomainError(f"hour must be in 0..{HOURS - 1}, got {hour}")
        v = T.take(self.embedding, hour)
        w = T.leaky_relu(self.lin_w.forward(v), LEAKY_SLOPE)
        w_fc = T.matmul(self.o_prime, T.scale_rows(self.o_mat, w))
        b_fc = T.leaky_relu(self.lin_b.forward(v), LEAKY_SLOPE)
        return w_fc, b_fc

    def apply_batch(self, feats, hours):
        """Per-sample generated prediction without materializing each W.

        Uses (O' diag(w) O) f == O' @ (w * (O @ f)) to batch over samples
        with different hours.
        """
        hours = np.asarray(hours, dtype=np.int64)
        if (hours < 0).any() or (hours >= HOURS).any():
            raise DomainError("hours must be in 0..23")
        v = T.take_rows(self.embedding, hours)
        w = T.leaky_relu(self.lin_w.forward(v), LEAKY_SLOPE)
        b_fc = T.leaky_relu(self.lin_b.forward(v), LEAKY_SLOPE)
        u = T.matmul(feats, T.transpose(self.o_mat))
        return T.add(T.matmul(T.hadamard(u, w), T.transpose(self.o_prime)), b_fc)

    def params(self):
        out = [("embedding", self.embedding)]
        out.extend((f"lin_w.{n}", p) for n, p in self.lin_w.params())
        out.extend((f"lin_b.{n}", p) for n, p in self.lin_b.params())
        out.append(("o", self.o_mat))
        out.append(("o_prime", self.o_prime))
        return out


def interval_params(net, hour):
    return net.generate(hour)


class DemandModel:
    """One built model: feature path plus head, with checkpoint support."""

    def __init__(self, kind, dims, seed, embedding=None, dtype=T.STANDARD,
                 standard_skip=False):
        if kind not in MODEL_KINDS:
            raise UsageError(f"unknown model kind {kind!r}; valid kinds: {', '.join(MODEL_KINDS)}")
        self.kind = kind
        self.dims = dims
        self.seed = seed
        self.dtype = dtype
        self.standard_skip = standard_skip
        self.feature_path = _FEATURE_PATH[kind]
        self.head = _HEAD[kind]
        rng = np.random.default_rng(seed)

        self.spatial = None
        self.lstm = None
        self.head_linear = None
        self.interval = None
        self.fusion_embedding = None
        self.fusion_linear = None

        if self.feature_path in ("spatial_lstm", "spatial_concat"):
            self.spatial = SpatialModule(dims, rng, dtype)
        elif self.feature_path == "shared_concat":
            self.spatial = SpatialModule(dims, rng, dtype, shared=True)
        if standard_skip and self.spatial is not None:
            for block in self.spatial.blocks:
                for unit in block.resunits:
                    unit.standard_skip = True

        if self.feature_path in ("spatial_lstm", "raw_lstm"):
            lstm_in = dims.spatial_dim if self.feature_path == "spatial_lstm" else dims.frame_dim
            self.lstm = LstmParams(lstm_in, dims.lstm_hidden, rng, dtype)
            feat_dim = dims.lstm_hidden
        else:
            feat_dim = dims.seq_len * dims.spatial_dim
        self.feat_dim = feat_dim

        if self.head in ("hyper",):
            if embedding is None:
                embedding = generate_hour_embeddings(dims.embed_dim, seed)
            self.interval = IntervalNet(
                feat_dim, dims, rng, embedding,
                trainable_embedding=(kind == "STDIEmbedding"), dtype=dtype,
            )
        elif self.head == "fusion":
            if embedding is None:
                embedding = generate_hour_embeddings(dims.embed_dim, seed)
            self.fusion_embedding = Tensor(np.asarray(embedding, dtype=dtype).copy(),
                                           requires_grad=False)
            self.fusion_linear = LinearLayer(dims.embed_dim, dims.fusion_dim, rng, dtype)
            self.head_linear = LinearLayer(feat_dim + dims.fusion_dim, dims.output_dim, rng, dtype)
        else:
            self.head_linear = LinearLayer(feat_dim, dims.output_dim, rng, dtype)

    # -- forward ---------------------------------------------------------

    def _features(self, seq, mode):
        if self.feature_path in ("spatial_lstm", "spatial_concat", "shared_concat"):
            s_t = self.spatial.forward(seq, mode)
            if self.feature_path == "spatial_lstm":
                return lstm_sequence(self.lstm, s_t)
            return T.flatten(s_t)
        rows = [T.flatten(T.take(seq, l)) for l in range(self.dims.seq_len)]
        return lstm_sequence(self.lstm, T.stack(rows))

    def _features_batch(self, seqs, mode):
        batch = seqs.data.shape[0]
        if self.feature_path in ("spatial_lstm", "spatial_concat", "shared_concat"):
            feats = self.spatial.forward_batch(seqs, mode)
            if self.feature_path == "spatial_lstm":
                return lstm_sequence_batch(self.lstm, feats)
            return T.hconcat(feats)
        frames = [
            T.reshape(T.take(seqs, l, axis=1), (batch, self.dims.frame_dim))
            for l in range(self.dims.seq_len)
        ]
        return lstm_sequence_batch(self.lstm, frames)

    def forward(self, seq, hour=None, mode="eval"):
        """Predict one (2, i, j) frame from a (L, 2, i, j) window."""
        d = self.dims
        feat = self._features(seq, mode)
        if self.head == "hyper":
            w_fc, b_fc = self.interval.generate(self._need_hour(hour))
            out = T.relu(T.affine(feat, w_fc, b_fc))
        elif self.head == "fusion":
            v = T.take(self.fusion_embedding, self._need_hour(hour))
            e = T.leaky_relu(self.fusion_linear.forward(v), LEAKY_SLOPE)
            out = T.relu(self.head_linear.forward(T.concat([feat, e])))
        else:
            out = T.relu(self.head_linear.forward(feat))
        return T.reshape(out, (2, d.rows, d.cols))

    def forward_batch(self, seqs, hours=None, mode="train"):
        """Predict (B, 2, i, j) from windows (B, L, 2, i, j) and hour labels."""
        d = self.dims
        batch = seqs.data.shape[0]
        feat = self._features_batch(seqs, mode)
        if self.head == "hyper":
            out = T.relu(self.interval.apply_batch(feat, self._need_hour(hours)))
        elif self.head == "fusion":
            v = T.take_rows(self.fusion_embedding, np.asarray(self._need_hour(hours), dtype=np.int64))
            e = T.leaky_relu(self.fusion_linear.forward(v), LEAKY_SLOPE)
            out = T.relu(self.head_linear.forward(T.hconcat([feat, e])))
        else:
            out = T.relu(self.head_linear.forward(feat))
        return T.reshape(out, (batch, 2, d.rows, d.cols))

    def _need_hour(self, hour):
        if hour is None:
            raise UsageError(f"model kind {self.kind} needs the target hour")
        return hour

    @property
    def uses_hour(self):
        return self.head in ("hyper", "fusion")

    # -- parameter registry ----------------------------------------------

    def named_tensors(self):
        """All parameter tensors as (name, tensor); frozen ones included."""
        out = []
        if self.spatial is not None:
            out.extend((f"spatial.{n}", p) for n, p in self.spatial.params())
        if self.lstm is not None:
            out.extend((f"lstm.{n}", p) for n, p in self.lstm.params())
        if self.interval is not None:
            out.extend((f"interval.{n}", p) for n, p in self.interval.params())
        if self.fusion_embedding is not None:
            out.append(("fusion.embedding", self.fusion_embedding))
            out.extend((f"fusion.lin.{n}", p) for n, p in self.fusion_linear.params())
        if self.head_linear is not None:
            out.extend((f"head.{n}", p) for n, p in self.head_linear.params())
        return out

    def named_states(self):
        if self.spatial is None:
            return []
        return [(f"spatial.{n}", s) for n, s in self.spatial.states()]

    def parameters(self):
        """Trainable tensors only (frozen hour tables are excluded)."""
        return [p for _, p in self.named_tensors() if p.requires_grad]

    def attach_tape(self, tape):
        for _, p in self.named_tensors():
            p.tape = tape

    def parameter_count(self, trainable_only=True):
        return sum(p.data.size for _, p in self.named_tensors()
                   if p.requires_grad or not trainable_only)

    def snapshot(self):
        params = {n: p.data.copy() for n, p in self.named_tensors()}
        states = {n: s.copy() for n, s in self.named_states()}
        return params, states

    def restore(self, snap):
        params, states = snap
        for n, p in self.named_tensors():
            p.data[...] = params[n]
        for n, s in self.named_states():
            s.running_mean[:] = states[n].running_mean
            s.running_var[:] = states[n].running_var


def build_model(kind, dims=None, seed=0, embedding=None, dtype=T.STANDARD,
                standard_skip=False):
    """Construct any model kind; see the module table for the mapping."""
    return DemandModel(kind, dims or ModelDims(), seed, embedding=embedding,
                       dtype=dtype, standard_skip=standard_skip)


def stdi_forward(model, seq, hour, mode="eval"):
    """Single-window prediction: spatial features, LSTM state, generated head."""
    return model.forward(seq, hour, mode)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"STDC"
CKPT_VERSION = 1


def save_checkpoint(path, model, extra=None):
    """Write a manifest plus raw little-endian float32 parameter data.

    The manifest records every tensor's name, shape, dtype and byte offset,
    the model kind and dims, plus batchnorm running statistics so that a
    reloaded model evaluates identically.
    """
    entries = []
    blobs = []
    offset = 0
    items = [(n, p.data, p.requires_grad) for n, p in model.named_tensors()]
    for name, state in model.named_states():
        items.append((f"{name}.running_mean", state.running_mean, False))
        items.append((f"{name}.running_var", state.running_var, False))
    for name, arr, trainable in items:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": len(raw),
            "trainable": bool(trainable),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "kind": model.kind,
        "dims": asdict(model.dims),
        "standard_skip": model.standard_skip,
        "entries": entries,
        "extra": extra or {},
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
        version, mlen = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        blob = fh.read()

    dims = ModelDims(**manifest["dims"])
    model = build_model(manifest["kind"], dims, seed=0,
                        standard_skip=manifest.get("standard_skip", False))
    arrays = {}
    for e in manifest["entries"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()

    for name, p in model.named_tensors():
        if name not in arrays:
            raise DataError(f"{path}: checkpoint is missing tensor {name}")
        if tuple(arrays[name].shape) != p.data.shape:
            raise DataError(
                f"{path}: shape mismatch for {name}: file {arrays[name].shape}, model {p.data.shape}"
            )
        p.data[...] = arrays[name].astype(model.dtype)
    for name, s in model.named_states():
        s.running_mean[:] = arrays[f"{name}.running_mean"]
        s.running_var[:] = arrays[f"{name}.running_var"]
    return model, manifest.get("extra", {})
