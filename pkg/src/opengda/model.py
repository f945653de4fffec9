"""Masked GCN extractor, open-set classifier head and three-way domain discriminator."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .rng import stream
from .tensor import ShapeError, Tape, ValueNode

CHECKPOINT_VERSION = 1


@dataclass
class GraphModel:
    """All trainable state.

    ``weights[l]`` is the extractor matrix of layer ``l`` and ``masks[l]`` its
    0/1 mask. The classifier is the pair ``known_head`` (d x k) and
    ``unknown_head`` (d x 1); the discriminator is ``disc[0]`` (d x h) followed
    by ``disc[1]`` (h x 3). No biases anywhere.
    """

    weights: list[np.ndarray]
    masks: list[np.ndarray]
    known_head: np.ndarray
    unknown_head: np.ndarray
    disc: list[np.ndarray]
    slope: float = 0.0
    grl_scale: float = 1.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def known_count(self) -> int:
        return self.known_head.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; masks excluded."""
        out = {f"W{i}": w for i, w in enumerate(self.weights)}
        out["phi"] = self.known_head
        out["w_unk"] = self.unknown_head
        out.update({f"D{i}": w for i, w in enumerate(self.disc)})
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for name, val in values.items():
            if name.startswith("W"):
                self.weights[int(name[1:])] = val
            elif name.startswith("D"):
                self.disc[int(name[1:])] = val
            elif name == "phi":
                self.known_head = val
            elif name == "w_unk":
                self.unknown_head = val
            else:
                raise KeyError(name)

    def copy(self) -> "GraphModel":
        return GraphModel(
            [w.copy() for w in self.weights],
            [m.copy() for m in self.masks],
            self.known_head.copy(),
            self.unknown_head.copy(),
            [w.copy() for w in self.disc],
            self.slope,
            self.grl_scale,
            self.seed,
            dict(self.meta),
        )


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_params(dims, known_count: int, seed: int, disc_hidden: int = 64, slope: float = 0.0,
                grl_scale: float = 1.0) -> GraphModel:
    """Glorot-uniform weights, all-ones masks. ``dims`` is ``[f, d_1, ..., d_L]``."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1 or known_count < 1 or disc_hidden < 1:
        raise ValueError(f"invalid model dims {dims}, known_count={known_count}, hidden={disc_hidden}")
    rng = stream(seed, "init")
    weights = [_glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    d = dims[-1]
    return GraphModel(
        weights=weights,
        masks=[np.ones_like(w) for w in weights],
        known_head=_glorot(rng, d, known_count),
        unknown_head=_glorot(rng, d, 1),
        disc=[_glorot(rng, d, disc_hidden), _glorot(rng, disc_hidden, 3)],
        slope=slope,
        grl_scale=grl_scale,
        seed=seed,
    )


def bind(model: GraphModel, tape: Tape, *, trainable: bool = True, masks_trainable: bool = False) -> dict[str, ValueNode]:
    """Put the model's arrays on ``tape``; keys follow :meth:`GraphModel.params` plus ``M<l>``."""
    leaf = tape.param if trainable else tape.const
    nodes = {name: leaf(val) for name, val in model.params().items()}
    for i, m in enumerate(model.masks):
        nodes[f"M{i}"] = tape.param(m) if masks_trainable else tape.const(m)
    return nodes


def forward_extractor(tape: Tape, adj, x: ValueNode, nodes: dict, model: GraphModel) -> ValueNode:
    """Embeddings ``Z^L``; hidden layers apply the activation, the last layer is linear."""
    layers = len(model.weights)
    if x.shape[1] != model.weights[0].shape[0]:
        raise ShapeError(f"features have {x.shape[1]} columns, layer 0 expects {model.weights[0].shape[0]}")
    h = x
    for i in range(layers):
        w_eff = tape.mul(nodes[f"W{i}"], nodes[f"M{i}"])
        h = tape.spmm(adj, tape.matmul(h, w_eff))
        if i < layers - 1:
            h = tape.relu(h, model.slope)
    return h


def classify(tape: Tape, z: ValueNode, nodes: dict, with_unknown: bool = True) -> ValueNode:
    """Logits ``[z phi, z w_unk]``; without the unknown head only ``z phi``."""
    if z.shape[1] != nodes["phi"].shape[0]:
        raise ShapeError(f"embedding width {z.shape[1]} != classifier input {nodes['phi'].shape[0]}")
    known = tape.matmul(z, nodes["phi"])
    if not with_unknown:
        return known
    return tape.concat_cols(known, tape.matmul(z, nodes["w_unk"]))


def discriminate(tape: Tape, z: ValueNode, nodes: dict, model: GraphModel, reverse: bool = True,
                 grl_scale: float | None = None) -> ValueNode:
    """Three domain logits (source, target-known, target-unknown) per row."""
    if z.shape[1] != nodes["D0"].shape[0]:
        raise ShapeError(f"embedding width {z.shape[1]} != discriminator input {nodes['D0'].shape[0]}")
    h = tape.grad_reverse(z, model.grl_scale if grl_scale is None else grl_scale) if reverse else z
    h = tape.relu(tape.matmul(h, nodes["D0"]), model.slope)
    return tape.matmul(h, nodes["D1"])


def embed(model: GraphModel, adj, features: np.ndarray) -> np.ndarray:
    """Gradient-free embeddings."""
    tape = Tape()
    nodes = bind(model, tape, trainable=False)
    return forward_extractor(tape, adj, tape.const(features), nodes, model).value


def logits(model: GraphModel, adj, features: np.ndarray, with_unknown: bool = True) -> np.ndarray:
    tape = Tape()
    nodes = bind(model, tape, trainable=False)
    z = forward_extractor(tape, adj, tape.const(features), nodes, model)
    return classify(tape, z, nodes, with_unknown).value


# checkpoint container: an .npz archive whose "meta" entry is a JSON document


def save_checkpoint(path, model: GraphModel, extra: dict | None = None) -> None:
    """Write ``meta`` then ``W*``, ``M*``, ``phi``, ``w_unk``, ``D*`` and any ``extra`` arrays."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": model.dims,
        "known_count": model.known_count,
        "disc_hidden": model.disc[0].shape[1],
        "slope": model.slope,
        "grl_scale": model.grl_scale,
        "seed": model.seed,
        "extra": model.meta,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, w in enumerate(model.weights):
        arrays[f"W{i}"] = w
    for i, m in enumerate(model.masks):
        arrays[f"M{i}"] = m
    arrays["phi"] = model.known_head
    arrays["w_unk"] = model.unknown_head
    for i, w in enumerate(model.disc):
        arrays[f"D{i}"] = w
    for k, v in (extra or {}).items():
        arrays[f"x_{k}"] = np.asarray(v)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[GraphModel, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        layers = len(meta["dims"]) - 1
        model = GraphModel(
            weights=[data[f"W{i}"].copy() for i in range(layers)],
            masks=[data[f"M{i}"].copy() for i in range(layers)],
            known_head=data["phi"].copy(),
            unknown_head=data["w_unk"].copy(),
            disc=[data["D0"].copy(), data["D1"].copy()],
            slope=meta["slope"],
            grl_scale=meta["grl_scale"],
            seed=meta["seed"],
            meta=meta.get("extra", {}),
        )
        extra = {k[2:]: data[k].copy() for k in data.files if k.startswith("x_")}
    return model, extra
