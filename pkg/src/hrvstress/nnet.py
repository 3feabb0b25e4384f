"""Minimal neural-network core: exactly the layer kinds the autoencoders need.

Every activation tensor is a float64 numpy array shaped (batch, length,
channels).  All trainable parameters of a network live in one flat vector
with named per-layer views, which keeps the optimizer and the checkpoint
format trivial.  Backward passes are hand-derived; the test suite checks
each layer kind against central finite differences.

Conventions fixed here and relied on elsewhere:

* conv1d uses `same` padding: the input is zero-padded on the right so the
  output keeps the input length, y[t] = sum_j w[j] @ x[t+j] + b.
* maxpool1d breaks ties toward the earliest index; its backward routes the
  gradient only to the argmax positions.
* lstm uses the canonical gate layout (input, forget, candidate, output) with
  sigmoid/sigmoid/tanh/sigmoid; the forget-gate bias starts at 1.0.
* Initialization is uniform Glorot, one shared generator, drawing in layer
  order (conv: w; dense: w; lstm: wx then wh).  Biases start at zero apart
  from the lstm forget slice.  Fixed seed means bit-identical weights.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "elu")


class ShapeError(ValueError):
    """Tensor does not fit a layer; the message names the layer."""


class StaleCacheError(RuntimeError):
    """The forward cache predates a parameter update."""


class CheckpointError(ValueError):
    """A weight checkpoint is malformed or belongs to another network."""


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    cfg: dict

    def describe(self) -> str:
        inner = ", ".join(f"{k}={v}" for k, v in self.cfg.items())
        return f"{self.kind}({inner})"


def conv1d(in_ch: int, out_ch: int, kernel: int = 2) -> LayerSpec:
    if min(in_ch, out_ch, kernel) < 1:
        raise ValueError("conv1d sizes must be positive")
    return LayerSpec("conv1d", {"in_ch": in_ch, "out_ch": out_ch, "kernel": kernel})


def maxpool1d(pool: int) -> LayerSpec:
    if pool < 2:
        raise ValueError("pool factor must be at least 2")
    return LayerSpec("maxpool1d", {"pool": pool})


def upsample1d(factor: int) -> LayerSpec:
    if factor < 2:
        raise ValueError("upsample factor must be at least 2")
    return LayerSpec("upsample1d", {"factor": factor})


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    if min(in_dim, out_dim) < 1:
        raise ValueError("dense sizes must be positive")
    return LayerSpec("dense", {"in_dim": in_dim, "out_dim": out_dim})


def lstm(in_dim: int, hidden: int, return_sequences: bool = False) -> LayerSpec:
    if min(in_dim, hidden) < 1:
        raise ValueError("lstm sizes must be positive")
    return LayerSpec(
        "lstm",
        {"in_dim": in_dim, "hidden": hidden, "return_sequences": bool(return_sequences)},
    )


def repeat(times: int) -> LayerSpec:
    if times < 1:
        raise ValueError("repeat count must be positive")
    return LayerSpec("repeat", {"times": times})


def activation(name: str) -> LayerSpec:
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}")
    return LayerSpec("activation", {"name": name})


def spec_to_jsonable(layers: list[LayerSpec]) -> list[dict]:
    return [{"kind": ls.kind, **ls.cfg} for ls in layers]


def spec_from_jsonable(data: list[dict]) -> list[LayerSpec]:
    out = []
    for entry in data:
        cfg = dict(entry)
        kind = cfg.pop("kind")
        out.append(LayerSpec(kind, cfg))
    return out


def spec_fingerprint(layers: list[LayerSpec]) -> str:
    blob = json.dumps(spec_to_jsonable(layers), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


def infer_shapes(layers: list[LayerSpec], input_shape: tuple[int, int]) -> list[tuple[int, int]]:
    """(length, channels) before layer 0 and after every layer.

    Raises ShapeError naming the first layer the running shape does not fit.
    """
    shapes = [tuple(input_shape)]
    length, ch = input_shape
    for i, ls in enumerate(layers):
        where = f"layer {i} {ls.describe()}"
        cfg = ls.cfg
        if ls.kind == "conv1d":
            if ch != cfg["in_ch"]:
                raise ShapeError(f"{where}: expected {cfg['in_ch']} channels, got {ch}")
            ch = cfg["out_ch"]
        elif ls.kind == "maxpool1d":
            if length < cfg["pool"]:
                raise ShapeError(f"{where}: length {length} shorter than pool window")
            length //= cfg["pool"]
        elif ls.kind == "upsample1d":
            length *= cfg["factor"]
        elif ls.kind == "dense":
            if ch != cfg["in_dim"]:
                raise ShapeError(f"{where}: expected {cfg['in_dim']} channels, got {ch}")
            ch = cfg["out_dim"]
        elif ls.kind == "lstm":
            if ch != cfg["in_dim"]:
                raise ShapeError(f"{where}: expected {cfg['in_dim']} channels, got {ch}")
            ch = cfg["hidden"]
            if not cfg["return_sequences"]:
                length = 1
        elif ls.kind == "repeat":
            if length != 1:
                raise ShapeError(f"{where}: repeat needs a length-1 sequence, got {length}")
            length = cfg["times"]
        elif ls.kind == "activation":
            pass
        else:
            raise ShapeError(f"{where}: unknown layer kind")
        shapes.append((length, ch))
    return shapes


def _param_shapes(ls: LayerSpec) -> list[tuple[str, tuple[int, ...]]]:
    cfg = ls.cfg
    if ls.kind == "conv1d":
        return [("w", (cfg["kernel"], cfg["in_ch"], cfg["out_ch"])), ("b", (cfg["out_ch"],))]
    if ls.kind == "dense":
        return [("w", (cfg["in_dim"], cfg["out_dim"])), ("b", (cfg["out_dim"],))]
    if ls.kind == "lstm":
        d, h = cfg["in_dim"], cfg["hidden"]
        return [("wx", (d, 4 * h)), ("wh", (h, 4 * h)), ("b", (4 * h,))]
    return []


def count_params(layers: list[LayerSpec]) -> int:
    """Analytic count: conv k*in*out+out, dense in*out+out, lstm 4*(in*h+h*h+h)."""
    total = 0
    for ls in layers:
        for _, shape in _param_shapes(ls):
            total += int(np.prod(shape))
    return total


# ---------------------------------------------------------------------------
# parameters


@dataclass
class NetParams:
    layers: list[LayerSpec]
    flat: np.ndarray
    index: list[dict[str, tuple[slice, tuple[int, ...]]]]
    revision: int = 0

    @property
    def param_count(self) -> int:
        return self.flat.size

    def get(self, layer_idx: int, name: str) -> np.ndarray:
        sl, shape = self.index[layer_idx][name]
        return self.flat[sl].reshape(shape)

    def zeros_like_flat(self) -> np.ndarray:
        return np.zeros_like(self.flat)

    def view(self, grads_flat: np.ndarray, layer_idx: int, name: str) -> np.ndarray:
        sl, shape = self.index[layer_idx][name]
        return grads_flat[sl].reshape(shape)


def _build_index(layers: list[LayerSpec]) -> tuple[list[dict], int]:
    index: list[dict] = []
    offset = 0
    for ls in layers:
        entry = {}
        for name, shape in _param_shapes(ls):
            n = int(np.prod(shape))
            entry[name] = (slice(offset, offset + n), shape)
            offset += n
        index.append(entry)
    return index, offset


def init_params(layers: list[LayerSpec], seed: int) -> NetParams:
    """Glorot-uniform weights, zero biases, lstm forget bias 1.0.

    Draw order is part of the reproducibility contract: layers in order, conv
    and dense draw their weight matrix, lstm draws wx then wh, and biases are
    written without consuming random numbers.
    """
    index, total = _build_index(layers)
    flat = np.zeros(total, dtype=np.float64)
    rng = np.random.default_rng(seed)
    params = NetParams(layers=layers, flat=flat, index=index)

    def glorot(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    for i, ls in enumerate(layers):
        cfg = ls.cfg
        if ls.kind == "conv1d":
            k, cin, cout = cfg["kernel"], cfg["in_ch"], cfg["out_ch"]
            params.get(i, "w")[...] = glorot((k, cin, cout), k * cin, k * cout)
        elif ls.kind == "dense":
            params.get(i, "w")[...] = glorot(
                (cfg["in_dim"], cfg["out_dim"]), cfg["in_dim"], cfg["out_dim"]
            )
        elif ls.kind == "lstm":
            d, h = cfg["in_dim"], cfg["hidden"]
            params.get(i, "wx")[...] = glorot((d, 4 * h), d, 4 * h)
            params.get(i, "wh")[...] = glorot((h, 4 * h), h, 4 * h)
            params.get(i, "b")[h : 2 * h] = 1.0
    return params


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Cache:
    revision: int
    entries: list[dict] = field(default_factory=list)


def _check_input(where: str, x: np.ndarray, want_ch: int) -> None:
    if x.shape[2] != want_ch:
        raise ShapeError(f"{where}: expected {want_ch} channels, got {x.shape[2]}")


def forward(params: NetParams, batch: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Run the network; the cache holds what each backward step needs."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"input must be (batch, length, channels), got shape {x.shape}")
    cache = Cache(revision=params.revision)
    for i, ls in enumerate(params.layers):
        where = f"layer {i} {ls.describe()}"
        cfg = ls.cfg
        entry: dict = {}
        if ls.kind == "conv1d":
            _check_input(where, x, cfg["in_ch"])
            w = params.get(i, "w")
            b = params.get(i, "b")
            B, L, _ = x.shape
            y = np.broadcast_to(b, (B, L, b.size)).copy()
            for j in range(cfg["kernel"]):
                if j >= L:
                    break
                y[:, : L - j, :] += x[:, j:, :] @ w[j]
            entry["x"] = x
            x = y
        elif ls.kind == "maxpool1d":
            p = cfg["pool"]
            B, L, C = x.shape
            if L < p:
                raise ShapeError(f"{where}: length {L} shorter than pool window")
            L2 = (L // p) * p
            blocks = x[:, :L2, :].reshape(B, L2 // p, p, C)
            idx = blocks.argmax(axis=2)
            entry["idx"] = idx
            entry["in_shape"] = x.shape
            x = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]
        elif ls.kind == "upsample1d":
            entry["factor"] = cfg["factor"]
            entry["in_len"] = x.shape[1]
            x = np.repeat(x, cfg["factor"], axis=1)
        elif ls.kind == "dense":
            _check_input(where, x, cfg["in_dim"])
            entry["x"] = x
            x = x @ params.get(i, "w") + params.get(i, "b")
        elif ls.kind == "lstm":
            _check_input(where, x, cfg["in_dim"])
            x, lstm_cache = _lstm_forward(params, i, x, cfg)
            entry.update(lstm_cache)
        elif ls.kind == "repeat":
            if x.shape[1] != 1:
                raise ShapeError(f"{where}: repeat needs a length-1 sequence, got {x.shape[1]}")
            entry["times"] = cfg["times"]
            x = np.repeat(x, cfg["times"], axis=1)
        elif ls.kind == "activation":
            entry["x"] = x
            if cfg["name"] == "relu":
                x = np.maximum(x, 0.0)
            else:
                x = np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))
        else:
            raise ShapeError(f"{where}: unknown layer kind")
        cache.entries.append(entry)
    return x, cache


def _lstm_forward(params: NetParams, i: int, x: np.ndarray, cfg: dict) -> tuple[np.ndarray, dict]:
    wx = params.get(i, "wx")
    wh = params.get(i, "wh")
    b = params.get(i, "b")
    B, L, _ = x.shape
    H = cfg["hidden"]
    xw = x @ wx + b
    hs = np.zeros((L, B, H))
    cs = np.zeros((L, B, H))
    gates = np.zeros((L, B, 4 * H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(L):
        z = xw[:, t, :] + h @ wh
        gi = expit(z[:, :H])
        gf = expit(z[:, H : 2 * H])
        gg = np.tanh(z[:, 2 * H : 3 * H])
        go = expit(z[:, 3 * H :])
        c = gf * c + gi * gg
        h = go * np.tanh(c)
        gates[t, :, :H] = gi
        gates[t, :, H : 2 * H] = gf
        gates[t, :, 2 * H : 3 * H] = gg
        gates[t, :, 3 * H :] = go
        cs[t] = c
        hs[t] = h
    if cfg["return_sequences"]:
        out = hs.transpose(1, 0, 2)
    else:
        out = hs[-1][:, None, :]
    return out, {"x": x, "hs": hs, "cs": cs, "gates": gates}


def backward(params: NetParams, cache: Cache, loss_grad: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. every parameter, as one flat vector.

    The cache must come from a forward pass on the current parameters; any
    optimizer step in between invalidates it.
    """
    if cache.revision != params.revision:
        raise StaleCacheError(
            f"cache is from parameter revision {cache.revision}, "
            f"parameters are at revision {params.revision}"
        )
    grads = params.zeros_like_flat()
    dy = np.asarray(loss_grad, dtype=np.float64)
    for i in range(len(params.layers) - 1, -1, -1):
        ls = params.layers[i]
        cfg = ls.cfg
        entry = cache.entries[i]
        if ls.kind == "conv1d":
            x = entry["x"]
            w = params.get(i, "w")
            B, L, Cin = x.shape
            Cout = cfg["out_ch"]
            dw = params.view(grads, i, "w")
            params.view(grads, i, "b")[...] += dy.sum(axis=(0, 1))
            dx = np.zeros_like(x)
            for j in range(cfg["kernel"]):
                if j >= L:
                    break
                end = L - j
                dx[:, j:, :] += dy[:, :end, :] @ w[j].T
                dw[j] += x[:, j:, :].reshape(-1, Cin).T @ dy[:, :end, :].reshape(-1, Cout)
            dy = dx
        elif ls.kind == "maxpool1d":
            p = cfg["pool"]
            B, L, C = entry["in_shape"]
            L2 = (L // p) * p
            dblocks = np.zeros((B, L2 // p, p, C))
            np.put_along_axis(dblocks, entry["idx"][:, :, None, :], dy[:, :, None, :], axis=2)
            dx = np.zeros((B, L, C))
            dx[:, :L2, :] = dblocks.reshape(B, L2, C)
            dy = dx
        elif ls.kind == "upsample1d":
            f = entry["factor"]
            B, _, C = dy.shape
            dy = dy.reshape(B, entry["in_len"], f, C).sum(axis=2)
        elif ls.kind == "dense":
            x = entry["x"]
            w = params.get(i, "w")
            cin, cout = w.shape
            params.view(grads, i, "w")[...] += (
                x.reshape(-1, cin).T @ dy.reshape(-1, cout)
            )
            params.view(grads, i, "b")[...] += dy.sum(axis=(0, 1))
            dy = dy @ w.T
        elif ls.kind == "lstm":
            dy = _lstm_backward(params, grads, i, cfg, entry, dy)
        elif ls.kind == "repeat":
            dy = dy.sum(axis=1, keepdims=True)
        elif ls.kind == "activation":
            x = entry["x"]
            if cfg["name"] == "relu":
                dy = dy * (x > 0.0)
            else:
                dy = dy * np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))
    return grads


def _lstm_backward(
    params: NetParams, grads: np.ndarray, i: int, cfg: dict, entry: dict, dy: np.ndarray
) -> np.ndarray:
    x = entry["x"]
    hs, cs, gates = entry["hs"], entry["cs"], entry["gates"]
    wx = params.get(i, "wx")
    wh = params.get(i, "wh")
    B, L, _ = x.shape
    H = cfg["hidden"]
    if cfg["return_sequences"]:
        dhs = dy.transpose(1, 0, 2)
    else:
        dhs = np.zeros((L, B, H))
        dhs[-1] = dy[:, 0, :]
    dwx = params.view(grads, i, "wx")
    dwh = params.view(grads, i, "wh")
    db = params.view(grads, i, "b")
    dx = np.zeros_like(x)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(L - 1, -1, -1):
        gi = gates[t, :, :H]
        gf = gates[t, :, H : 2 * H]
        gg = gates[t, :, 2 * H : 3 * H]
        go = gates[t, :, 3 * H :]
        tc = np.tanh(cs[t])
        dh = dhs[t] + dh_next
        do = dh * tc
        dc = dc_next + dh * go * (1.0 - tc ** 2)
        c_prev = cs[t - 1] if t > 0 else np.zeros((B, H))
        h_prev = hs[t - 1] if t > 0 else np.zeros((B, H))
        dz = np.concatenate(
            [
                dc * gg * gi * (1.0 - gi),
                dc * c_prev * gf * (1.0 - gf),
                dc * gi * (1.0 - gg ** 2),
                do * go * (1.0 - go),
            ],
            axis=1,
        )
        dwx += x[:, t, :].T @ dz
        dwh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t, :] = dz @ wx.T
        dh_next = dz @ wh.T
        dc_next = dc * gf
    return dx


# ---------------------------------------------------------------------------
# losses


def loss_mae(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient (0 where pred equals target)."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetParams, lr: float = 1e-4) -> "AdamState":
        return cls(m=params.zeros_like_flat(), v=params.zeros_like_flat(), lr=lr)


def adam_step(state: AdamState, params: NetParams, grads: np.ndarray) -> None:
    """One in-place Adam update with bias correction."""
    if grads.shape != params.flat.shape:
        raise ShapeError("gradient vector length does not match parameters")
    if not np.all(np.isfinite(grads)):
        bad = int(np.sum(~np.isfinite(grads)))
        raise FloatingPointError(f"non-finite gradient ({bad} entries); aborting training")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params.flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.revision += 1


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "n": int(a.size), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if a.size != blob["n"]:
        raise CheckpointError(f"weight blob has {a.size} values, header says {blob['n']}")
    return a


def save_checkpoint(path, params: NetParams, seed: int, adam: AdamState | None = None) -> None:
    doc = {
        "format": "hrvstress-net",
        "format_version": FORMAT_VERSION,
        "spec_fingerprint": spec_fingerprint(params.layers),
        "spec": spec_to_jsonable(params.layers),
        "seed": seed,
        "weights": _encode_array(params.flat),
    }
    if adam is not None:
        doc["adam"] = {
            "t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "m": _encode_array(adam.m), "v": _encode_array(adam.v),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[NetParams, int, AdamState | None]:
    """Restore a network; refuses checkpoints whose fingerprint does not match
    the architecture they claim to hold."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "hrvstress-net":
        raise CheckpointError(f"{path}: not a network checkpoint")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {doc.get('format_version')}")
    layers = spec_from_jsonable(doc["spec"])
    if spec_fingerprint(layers) != doc["spec_fingerprint"]:
        raise CheckpointError(f"{path}: spec fingerprint mismatch")
    index, total = _build_index(layers)
    flat = _decode_array(doc["weights"])
    if flat.size != total:
        raise CheckpointError(f"{path}: expected {total} weights, found {flat.size}")
    params = NetParams(layers=layers, flat=flat, index=index)
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState(
            m=_decode_array(a["m"]), v=_decode_array(a["v"]), t=a["t"],
            lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
        )
        if adam.m.size != total or adam.v.size != total:
            raise CheckpointError(f"{path}: Adam state length mismatch")
    return params, doc["seed"], adam
