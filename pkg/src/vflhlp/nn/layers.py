"""Dense layers, embedding tables and the tabular encoder.

Everything is float64 and the backward passes are exact reverse-mode
gradients of the forward passes. No autograd framework: training here has
to agree with finite differences to ~1e-4 relative error and the split
protocol has to agree with a centralized reference to 1e-10, so the
arithmetic is kept explicit and deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SchemaError

ACTIVATIONS = ("relu", "identity")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(np.float64)


def _as_f64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise SchemaError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


class DenseLayer:
    """Affine map plus an elementwise activation ('relu' or 'identity')."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str):
        if activation not in ACTIVATIONS:
            raise SchemaError(f"unknown activation {activation!r}")
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise SchemaError(
                f"bad dense shapes: weights {weights.shape}, bias {bias.shape}"
            )
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @classmethod
    def init(
        cls, rng: np.random.Generator, in_dim: int, out_dim: int, activation: str
    ) -> "DenseLayer":
        w = glorot_uniform(rng, out_dim, in_dim)
        b = np.zeros(out_dim, dtype=np.float64)
        return cls(w, b, activation)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (activated output, pre-activation)."""
        if x.shape[1] != self.in_dim:
            raise SchemaError(
                f"dense layer expects input dim {self.in_dim}, got {x.shape[1]}"
            )
        z = x @ self.weights.T + self.bias
        if self.activation == "relu":
            return np.maximum(z, 0.0), z
        return z, z

    def backward(
        self, x: np.ndarray, z: np.ndarray, upstream: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (d_weights, d_bias, d_input) for the given upstream grad."""
        if self.activation == "relu":
            dz = upstream * (z > 0.0)
        else:
            dz = upstream
        dw = dz.T @ x
        db = dz.sum(axis=0)
        dx = dz @ self.weights
        return dw, db, dx


@dataclass
class MlpTape:
    """Per-layer (input, pre-activation) pairs saved by Mlp.forward."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


class Mlp:
    """Stack of dense layers; hidden layers relu, final layer identity by default."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise SchemaError("Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise SchemaError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )
        self.layers = layers

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        dims: list[int],
        hidden_activation: str = "relu",
        final_activation: str = "identity",
    ) -> "Mlp":
        """Build from a dim chain [in, h1, ..., out] with Glorot uniform weights."""
        if len(dims) < 2:
            raise SchemaError("dims must list at least input and output size")
        layers = []
        for i, (din, dout) in enumerate(zip(dims, dims[1:])):
            act = final_activation if i == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer.init(rng, din, dout, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x) -> tuple[np.ndarray, MlpTape]:
        x = _as_f64(x, "mlp input")
        inputs, preacts = [], []
        out = x
        for layer in self.layers:
            inputs.append(out)
            out, z = layer.forward(out)
            preacts.append(z)
        return out, MlpTape(inputs, preacts)

    def backward(
        self, tape: MlpTape, upstream: np.ndarray
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Return (per-layer (dW, db) list, gradient w.r.t. the input)."""
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != tape.preacts[-1].shape:
            raise SchemaError(
                f"upstream shape {upstream.shape} does not match output "
                f"{tape.preacts[-1].shape}"
            )
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        d = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            dw, db, d = self.layers[i].backward(tape.inputs[i], tape.preacts[i], d)
            grads[i] = (dw, db)
        return grads, d

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed '<i>.weight' / '<i>.bias'."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            out[f"{i}.weight"] = layer.weights
            out[f"{i}.bias"] = layer.bias
        return out

    def grads_dict(
        self, layer_grads: list[tuple[np.ndarray, np.ndarray]]
    ) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (dw, db) in enumerate(layer_grads):
            out[f"{i}.weight"] = dw
            out[f"{i}.bias"] = db
        return out


class EmbeddingTable:
    """Per-field embedding matrices; row 0 of every table is the unseen bucket."""

    def __init__(self, tables: dict[str, np.ndarray]):
        if not tables:
            raise SchemaError("EmbeddingTable needs at least one field")
        dims = {t.shape[1] for t in tables.values()}
        if len(dims) != 1:
            raise SchemaError(f"embedding dims differ across fields: {sorted(dims)}")
        self.tables = {k: np.asarray(v, dtype=np.float64) for k, v in tables.items()}
        self.embed_dim = next(iter(dims))

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        cardinalities: list[tuple[str, int]],
        embed_dim: int,
    ) -> "EmbeddingTable":
        tables = {}
        for name, card in cardinalities:
            if card < 1:
                raise SchemaError(f"field {name!r} has cardinality {card}")
            tables[name] = rng.uniform(-0.05, 0.05, size=(card, embed_dim))
        return cls(tables)

    @property
    def field_names(self) -> list[str]:
        return list(self.tables.keys())

    @property
    def out_dim(self) -> int:
        return len(self.tables) * self.embed_dim

    def _clean_indices(self, cat: np.ndarray) -> np.ndarray:
        cat = np.asarray(cat)
        if cat.ndim != 2 or cat.shape[1] != len(self.tables):
            raise SchemaError(
                f"categorical batch must be [n, {len(self.tables)}], got {cat.shape}"
            )
        cat = cat.astype(np.int64, copy=True)
        # out-of-range indices fall into the reserved unseen bucket
        for j, table in enumerate(self.tables.values()):
            col = cat[:, j]
            bad = (col < 0) | (col >= table.shape[0])
            if bad.any():
                col[bad] = 0
        return cat

    def lookup(self, cat: np.ndarray) -> np.ndarray:
        """Gather and concatenate per-field rows: [n, n_fields * embed_dim]."""
        idx = self._clean_indices(cat)
        parts = [table[idx[:, j]] for j, table in enumerate(self.tables.values())]
        return np.concatenate(parts, axis=1)

    def backward(self, cat: np.ndarray, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Scatter-add the upstream gradient back into per-table grads."""
        idx = self._clean_indices(cat)
        if upstream.shape != (idx.shape[0], self.out_dim):
            raise SchemaError(
                f"embedding upstream must be [n, {self.out_dim}], got {upstream.shape}"
            )
        grads = {}
        for j, (name, table) in enumerate(self.tables.items()):
            g = np.zeros_like(table)
            sl = upstream[:, j * self.embed_dim : (j + 1) * self.embed_dim]
            np.add.at(g, idx[:, j], sl)
            grads[name] = g
        return grads


@dataclass
class EncoderTape:
    cat: np.ndarray | None
    mlp_tape: MlpTape


@dataclass
class GradBundle:
    """All parameter gradients plus the gradient w.r.t. the mlp input row."""

    param_grads: dict[str, np.ndarray]
    input_grads: np.ndarray


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of one party's encoder, enough to rebuild it exactly."""

    cat_fields: tuple[tuple[str, int], ...]  # (field name, cardinality)
    num_fields: int
    embed_dim: int
    hidden: tuple[int, ...]  # mlp widths, last entry is the representation dim

    def __post_init__(self):
        if not self.hidden:
            raise SchemaError("encoder needs at least one mlp layer width")
        if self.cat_fields and self.embed_dim < 1:
            raise SchemaError("embed_dim must be >= 1 when categorical fields exist")
        if self.num_fields < 0:
            raise SchemaError("num_fields must be >= 0")
        if self.input_dim == 0:
            raise SchemaError("encoder has no input features")

    @property
    def input_dim(self) -> int:
        return len(self.cat_fields) * self.embed_dim + self.num_fields

    @property
    def rep_dim(self) -> int:
        return self.hidden[-1]

    def build(self, rng: np.random.Generator) -> "TabularEncoder":
        """Draw a fresh encoder; embeddings first, then mlp, in one stream."""
        embed = None
        if self.cat_fields:
            embed = EmbeddingTable.init(rng, list(self.cat_fields), self.embed_dim)
        mlp = Mlp.init(rng, [self.input_dim, *self.hidden])
        return TabularEncoder(embed, mlp, self)

    def build_empty(self) -> "TabularEncoder":
        """All-zero encoder, for loading saved parameters into."""
        embed = None
        if self.cat_fields:
            embed = EmbeddingTable(
                {
                    name: np.zeros((card, self.embed_dim))
                    for name, card in self.cat_fields
                }
            )
        dims = [self.input_dim, *self.hidden]
        layers = [
            DenseLayer(
                np.zeros((dout, din)),
                np.zeros(dout),
                "identity" if i == len(dims) - 2 else "relu",
            )
            for i, (din, dout) in enumerate(zip(dims, dims[1:]))
        ]
        return TabularEncoder(embed, Mlp(layers), self)


class TabularEncoder:
    """Embedding tables (optional) feeding an Mlp; one per party."""

    def __init__(self, embed: EmbeddingTable | None, mlp: Mlp, spec: EncoderSpec):
        self.embed = embed
        self.mlp = mlp
        self.spec = spec

    @property
    def rep_dim(self) -> int:
        return self.mlp.out_dim

    def forward(self, cat: np.ndarray | None, num: np.ndarray | None):
        """Embed + concat + mlp. Returns (representation, tape)."""
        parts = []
        cat_arr = None
        n = None
        if self.embed is not None:
            if cat is None:
                raise SchemaError("encoder has embeddings but got no categorical batch")
            cat_arr = np.asarray(cat)
            parts.append(self.embed.lookup(cat_arr))
            n = cat_arr.shape[0]
        if self.spec.num_fields:
            if num is None:
                raise SchemaError("encoder expects numerical features but got none")
            num = _as_f64(num, "numerical batch")
            if num.shape[1] != self.spec.num_fields:
                raise SchemaError(
                    f"expected {self.spec.num_fields} numerical columns, "
                    f"got {num.shape[1]}"
                )
            if n is not None and num.shape[0] != n:
                raise SchemaError("categorical and numerical row counts differ")
            parts.append(num)
        x = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        out, mlp_tape = self.mlp.forward(x)
        return out, EncoderTape(cat_arr, mlp_tape)

    def backward(self, tape: EncoderTape, upstream: np.ndarray) -> GradBundle:
        layer_grads, dx = self.mlp.backward(tape.mlp_tape, upstream)
        grads = {f"mlp.{k}": v for k, v in self.mlp.grads_dict(layer_grads).items()}
        if self.embed is not None:
            e_dim = self.embed.out_dim
            emb_grads = self.embed.backward(tape.cat, dx[:, :e_dim])
            for name, g in emb_grads.items():
                grads[f"embed.{name}"] = g
        return GradBundle(param_grads=grads, input_grads=dx)

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays; mutating them mutates the encoder."""
        out: dict[str, np.ndarray] = {}
        if self.embed is not None:
            for name, table in self.embed.tables.items():
                out[f"embed.{name}"] = table
        for k, v in self.mlp.params().items():
            out[f"mlp.{k}"] = v
        return out

    def params_copy(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameters in place; names and shapes must match exactly."""
        current = self.params()
        missing = sorted(set(current) - set(values))
        extra = sorted(set(values) - set(current))
        if missing or extra:
            raise SchemaError(
                f"parameter name mismatch: missing {missing}, unexpected {extra}"
            )
        for name, arr in current.items():
            new = np.asarray(values[name], dtype=np.float64)
            if new.shape != arr.shape:
                raise SchemaError(
                    f"parameter {name!r} has shape {new.shape}, expected {arr.shape}"
                )
            arr[...] = new
