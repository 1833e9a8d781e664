"""Encoder, decoder with mixed-type output heads, and classifier head.

Two forward paths share the same parameters: a taped one used for training
(:func:`forward`) and a plain numpy one for inference (:func:`encode_batch`,
:func:`decode_batch`, :func:`classify_batch`).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import FeatureLayout
from .numerics import AdamState, Layer, ParamStore, Tape, Var

CHECKPOINT_FORMAT = "fairnn-checkpoint"
CHECKPOINT_VERSION = 1
THRESHOLD = 0.5
GROUP_ORDER = ("encoder", "decoder", "classifier")


@dataclass(frozen=True)
class FairNNConfig:
    """Layer widths of the three blocks.

    The encoder maps ``input_dim -> *encoder_widths -> latent_dim``; the
    decoder mirrors it back to ``input_dim``; the classifier maps
    ``latent_dim -> classifier_hidden -> 1``.
    """

    input_dim: int
    layout: FeatureLayout
    encoder_widths: tuple[int, ...] = (64, 32)
    latent_dim: int = 10
    classifier_hidden: int = 32

    def __post_init__(self):
        if self.layout.width != self.input_dim:
            raise nx.DimensionError(
                f"output layout width {self.layout.width} != input_dim {self.input_dim}"
            )
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be at least 2")

    @property
    def encoder_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.encoder_widths, self.latent_dim)

    @property
    def decoder_dims(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_dims))

    @property
    def classifier_dims(self) -> tuple[int, ...]:
        return (self.latent_dim, self.classifier_hidden, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = {"n_numerical": self.layout.n_numerical, "blocks": list(self.layout.blocks)}
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "FairNNConfig":
        lay = d["layout"]
        return cls(
            input_dim=d["input_dim"],
            layout=FeatureLayout(lay["n_numerical"], tuple(lay["blocks"])),
            encoder_widths=tuple(d["encoder_widths"]),
            latent_dim=d["latent_dim"],
            classifier_hidden=d["classifier_hidden"],
        )


def init_params(config: FairNNConfig, rng: np.random.Generator) -> ParamStore:
    return ParamStore(
        {
            "encoder": nx.init_stack(config.encoder_dims, rng),
            "decoder": nx.init_stack(config.decoder_dims, rng),
            "classifier": nx.init_stack(config.classifier_dims, rng),
        }
    )


def zero_params(config: FairNNConfig) -> ParamStore:
    def zeros(dims):
        return [Layer(np.zeros((a, b)), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]

    return ParamStore(
        {
            "encoder": zeros(config.encoder_dims),
            "decoder": zeros(config.decoder_dims),
            "classifier": zeros(config.classifier_dims),
        }
    )


# ---------------------------------------------------------------------------
# Inference path
# ---------------------------------------------------------------------------


def _stack_np(x, layers, relu_last: bool):
    for i, layer in enumerate(layers):
        x = x @ layer.weight + layer.bias
        if i < len(layers) - 1 or relu_last:
            x = np.maximum(x, 0.0)
    return x


def _check_width(x: np.ndarray, width: int, what: str):
    if x.shape[1] != width:
        raise nx.DimensionError(f"{what} has {x.shape[1]} columns, expected {width}")


def encode_batch(params: ParamStore, X) -> np.ndarray:
    """Latent codes; hidden layers use ReLU, the latent layer is linear."""
    X = nx.as_matrix(X, "X")
    layers = params.groups["encoder"]
    _check_width(X, layers[0].weight.shape[0], "X")
    return _stack_np(X, layers, relu_last=False)


def _heads_np(logits: np.ndarray, layout: FeatureLayout) -> np.ndarray:
    out = np.empty_like(logits)
    K = layout.n_numerical
    out[:, :K] = nx.sigmoid_np(logits[:, :K])
    for sl in layout.block_slices():
        out[:, sl] = nx.softmax_rows_np(logits[:, sl])
    return out


def decode_batch(params: ParamStore, Z, layout: FeatureLayout) -> np.ndarray:
    """Reconstruction: sigmoid numerical columns, one softmax per nominal block."""
    Z = nx.as_matrix(Z, "Z")
    layers = params.groups["decoder"]
    _check_width(Z, layers[0].weight.shape[0], "Z")
    return _heads_np(_stack_np(Z, layers, relu_last=False), layout)


def classify_batch(params: ParamStore, Z) -> np.ndarray:
    """Positive-class probabilities, shape ``(B,)``."""
    Z = nx.as_matrix(Z, "Z")
    layers = params.groups["classifier"]
    _check_width(Z, layers[0].weight.shape[0], "Z")
    return nx.sigmoid_np(_stack_np(Z, layers, relu_last=False))[:, 0]


def hard_labels(prob) -> np.ndarray:
    return (np.asarray(prob) >= THRESHOLD).astype(np.int8)


# ---------------------------------------------------------------------------
# Training path
# ---------------------------------------------------------------------------


@dataclass
class Forward:
    leaves: list[Var]
    Z: Var
    X_hat: Var
    prob: Var
    extras: dict = field(default_factory=dict)


def param_leaves(tape: Tape, params: ParamStore) -> list[Var]:
    """One leaf per array of ``params.arrays()`` (each leaf holds a copy)."""
    leaves = []
    for a in params.arrays():
        v = tape.leaf(a)
        leaves.append(v)
    return leaves


def _stack(x, leaves, relu_last: bool):
    n = len(leaves) // 2
    for i in range(n):
        x = nx.affine_forward(x, leaves[2 * i], leaves[2 * i + 1])
        if i < n - 1 or relu_last:
            x = nx.relu(x)
    return x


def _heads(logits: Var, layout: FeatureLayout) -> Var:
    K = layout.n_numerical
    parts = []
    if K:
        parts.append(nx.sigmoid(nx.columns(logits, 0, K)))
    for sl in layout.block_slices():
        parts.append(nx.softmax_rows(nx.columns(logits, sl.start, sl.stop)))
    return parts[0] if len(parts) == 1 else nx.concat_columns(parts)


def forward(tape: Tape, params: ParamStore, X, layout: FeatureLayout, leaves=None) -> Forward:
    """Taped forward pass of all three blocks on batch ``X``."""
    X = nx.as_matrix(X, "X")
    if leaves is None:
        leaves = param_leaves(tape, params)
    n_enc = 2 * len(params.groups["encoder"])
    n_dec = 2 * len(params.groups["decoder"])
    enc, dec, cls = leaves[:n_enc], leaves[n_enc : n_enc + n_dec], leaves[n_enc + n_dec :]
    if X.shape[1] != enc[0].value.shape[0]:
        raise nx.DimensionError(f"X has {X.shape[1]} columns, expected {enc[0].value.shape[0]}")
    Z = _stack(X, enc, relu_last=False)
    X_hat = _heads(_stack(Z, dec, relu_last=False), layout)
    prob = nx.sigmoid(_stack(Z, cls, relu_last=False))
    return Forward(leaves, Z, X_hat, prob)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _unarr(d) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(config: FairNNConfig, params: ParamStore, seed: int | None, meta: dict | None = None) -> dict:
    groups = {}
    for name, layers in params.groups.items():
        groups[name] = [{"weight": _arr(l.weight), "bias": _arr(l.bias)} for l in layers]
    adam = {
        "step": params.adam.step,
        "m": [[_arr(a), _arr(b)] for a, b in params.adam.m],
        "v": [[_arr(a), _arr(b)] for a, b in params.adam.v],
    }
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "seed": seed,
        "params": groups,
        "adam": adam,
        "meta": meta or {},
    }


def params_from_dict(d) -> tuple[FairNNConfig, ParamStore]:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a fairnn checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    config = FairNNConfig.from_dict(d["config"])
    if set(d["params"]) != set(GROUP_ORDER):
        raise ValueError(f"checkpoint parameter groups {sorted(d['params'])} != {sorted(GROUP_ORDER)}")
    # JSON objects are unordered; the flat array order follows GROUP_ORDER
    groups = {
        name: [Layer(_unarr(l["weight"]), _unarr(l["bias"])) for l in d["params"][name]]
        for name in GROUP_ORDER
    }
    adam = AdamState(
        m=[(_unarr(a), _unarr(b)) for a, b in d["adam"]["m"]],
        v=[(_unarr(a), _unarr(b)) for a, b in d["adam"]["v"]],
        step=d["adam"]["step"],
    )
    params = ParamStore(groups, adam)
    expected = init_params(config, np.random.default_rng(0))
    for got, want in zip(params.arrays(), expected.arrays()):
        if got.shape != want.shape:
            raise nx.DimensionError(f"checkpoint array {got.shape} does not match config {want.shape}")
    return config, params


def save_checkpoint(path, config: FairNNConfig, params: ParamStore, seed=None, meta=None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(config, params, seed, meta), fh, sort_keys=True)


def load_checkpoint(path) -> tuple[FairNNConfig, ParamStore, dict]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    config, params = params_from_dict(d)
    return config, params, d
