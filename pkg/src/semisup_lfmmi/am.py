"""Factorized TDNN acoustic model in numpy.

Each hidden layer splices its input at a set of time offsets, projects the
splice through a semi-orthogonal bottleneck factor B, expands with A, adds
a bias and applies ReLU (then dropout in train mode).  A layer may also
concatenate the output of an earlier, non-adjacent layer to its input.

Offsets are given in input-frame units.  Every layer is evaluated at the
full input rate over the frames its context allows; outputs are read from
the last layer every ``subsampling`` frames starting at the first valid one.
"""
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InsufficientContextError, ParseError, TrainingDivergenceError

NU = 1.0 / 8.0
ORTHO_TOL = 1e-3


@dataclass(frozen=True)
class LayerConfig:
    offsets: tuple
    hidden: int
    bottleneck: int
    skip: int = None  # index of an earlier layer (0 = input features)

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 140
    layers: tuple = ()
    output_dim: int = 2
    dropout: float = 0.0
    subsampling: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerConfig) else LayerConfig(*l) for l in self.layers))
        if not self.layers:
            raise ContractError("at least one hidden layer required")
        if self.output_dim < 2:
            raise ContractError("output dim must be >= 2")
        if self.subsampling < 1:
            raise ContractError("subsampling factor must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")
        for i, layer in enumerate(self.layers, 1):
            if not layer.offsets or list(layer.offsets) != sorted(set(layer.offsets)):
                raise ContractError(f"layer {i}: offsets must be sorted and distinct")
            if i == 1 and 0 not in layer.offsets:
                raise ContractError("layer 1 offsets must include 0")
            if layer.skip is not None and not 0 <= layer.skip < i - 1:
                raise ContractError(f"layer {i}: skip source must be a non-adjacent earlier layer")

    def layer_input_dim(self, i):
        """Width of the (unspliced) input to hidden layer ``i`` (1-based)."""
        prev = self.input_dim if i == 1 else self.layers[i - 2].hidden
        skip = self.layers[i - 1].skip
        if skip is not None:
            prev += self.input_dim if skip == 0 else self.layers[skip - 1].hidden
        return prev

    def ranges(self, T):
        """Valid [lo, hi] input-time range of every layer (index 0 = input)."""
        spans = [(0, T - 1)]
        for i, layer in enumerate(self.layers, 1):
            lo, hi = spans[i - 1]
            if layer.skip is not None:
                slo, shi = spans[layer.skip]
                lo, hi = max(lo, slo), min(hi, shi)
            spans.append((lo - layer.offsets[0], hi - layer.offsets[-1]))
        return spans

    @property
    def left_context(self):
        return self.ranges(0)[-1][0]

    @property
    def right_context(self):
        return -1 - self.ranges(0)[-1][1]

    def num_outputs(self, T):
        usable = T - self.left_context - self.right_context
        return max(0, math.ceil(usable / self.subsampling))


@dataclass(frozen=True, eq=False)
class AcousticModel:
    config: ModelConfig
    params: dict  # name -> array, in declaration order

    def layer(self, i):
        return self.params[f"layer{i}.A"], self.params[f"layer{i}.B"], self.params[f"layer{i}.b"]


@dataclass(frozen=True, eq=False)
class FrameOutputs:
    scores: np.ndarray  # T_out x output_dim log-scores
    frame_times: np.ndarray  # input time index of every output frame


def param_shapes(config):
    shapes = {}
    for i, layer in enumerate(config.layers, 1):
        spliced = len(layer.offsets) * config.layer_input_dim(i)
        shapes[f"layer{i}.A"] = (layer.hidden, layer.bottleneck)
        shapes[f"layer{i}.B"] = (layer.bottleneck, spliced)
        shapes[f"layer{i}.b"] = (layer.hidden,)
    shapes["output.W"] = (config.output_dim, config.layers[-1].hidden)
    shapes["output.b"] = (config.output_dim,)
    return shapes


def num_params(model):
    return sum(int(np.prod(a.shape)) for a in model.params.values())


def ortho_error(m):
    return float(np.linalg.norm(m @ m.T - np.eye(m.shape[0])))


def semi_orthogonal_step(m):
    """One step of m <- m - 4*nu*(m m^T - I) m with nu = 1/8.

    The fixed points are matrices with orthonormal rows; convergence is
    quadratic from anywhere with spectral norm below sqrt(3).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] > m.shape[1]:
        raise ContractError(f"semi-orthogonal step needs rows <= columns, got {m.shape}")
    p = m @ m.T
    p[np.diag_indices_from(p)] -= 1.0
    return m - 4.0 * NU * (p @ m)


def init_model(config, seed):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        scale = 1.0 / math.sqrt(shape[1])
        w = rng.uniform(-scale, scale, size=shape)
        if name.endswith(".B"):
            w /= max(1.0, np.linalg.norm(w, 2))
            for _ in range(100):
                if ortho_error(w) <= ORTHO_TOL:
                    break
                w = semi_orthogonal_step(w)
        params[name] = w
    return AcousticModel(config, params)


def _splice(x, lo_in, lo, hi, offsets):
    n = hi - lo + 1
    return np.concatenate([x[lo + o - lo_in:lo + o - lo_in + n] for o in offsets], axis=1)


def _run(model, features, mode, seed):
    cfg = model.config
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ContractError(f"features must be T x {cfg.input_dim}, got {x.shape}")
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be train or eval, got {mode!r}")
    T = x.shape[0]
    need = cfg.left_context + cfg.right_context + 1
    if T < need:
        raise InsufficientContextError(need, T)
    spans = cfg.ranges(T)
    rng = np.random.default_rng(seed) if mode == "train" and cfg.dropout > 0 else None
    keep = 1.0 - cfg.dropout
    outs = [x]
    cache = []
    for i, layer in enumerate(cfg.layers, 1):
        lo, hi = spans[i]
        src = [(i - 1, outs[i - 1])]
        if layer.skip is not None:
            src.append((layer.skip, outs[layer.skip]))
        # every source restricted to the common input range
        in_lo = max(spans[j][0] for j, _ in src)
        in_hi = min(spans[j][1] for j, _ in src)
        parts = [h[in_lo - spans[j][0]:in_hi - spans[j][0] + 1] for j, h in src]
        layer_in = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
        z = _splice(layer_in, in_lo, lo, hi, layer.offsets)
        A, B, b = model.layer(i)
        u = z @ B.T
        v = u @ A.T + b
        h = np.maximum(v, 0.0)
        mask = None
        if rng is not None:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        outs.append(h)
        cache.append((src, in_lo, in_hi, z, u, v, mask))
    lo, hi = spans[-1]
    times = np.arange(lo, hi + 1, cfg.subsampling)
    top = outs[-1][times - lo]
    scores = top @ model.params["output.W"].T + model.params["output.b"]
    return FrameOutputs(scores, times), (spans, outs, cache, top, times)


def forward(model, features, mode="eval", seed=0):
    """Output log-scores; dropout (train mode only) is drawn from ``seed``."""
    out, _ = _run(model, features, mode, seed)
    if not np.all(np.isfinite(out.scores)):
        raise TrainingDivergenceError("non-finite network output")
    return out


def backward(model, features, grad_at_outputs, mode="eval", seed=0):
    """Gradients of sum(outputs * grad_at_outputs) for every parameter."""
    cfg = model.config
    out, (spans, outs, cache, top, times) = _run(model, features, mode, seed)
    g = np.asarray(grad_at_outputs, dtype=float)
    if g.shape != out.scores.shape:
        raise ContractError(f"output gradient shape {g.shape} != {out.scores.shape}")
    grads = {}
    grads["output.W"] = g.T @ top
    grads["output.b"] = g.sum(axis=0)
    gh = [np.zeros_like(h) for h in outs]
    lo = spans[-1][0]
    gh[-1][times - lo] += g @ model.params["output.W"]
    for i in range(len(cfg.layers), 0, -1):
        layer = cfg.layers[i - 1]
        src, in_lo, in_hi, z, u, v, mask = cache[i - 1]
        A, B, _ = model.layer(i)
        gv = gh[i] if mask is None else gh[i] * mask
        gv = gv * (v > 0)
        grads[f"layer{i}.A"] = gv.T @ u
        grads[f"layer{i}.b"] = gv.sum(axis=0)
        gu = gv @ A
        grads[f"layer{i}.B"] = gu.T @ z
        if i == 1 and layer.skip is None:
            continue  # no gradient needed for the features
        gz = gu @ B
        width = sum(h.shape[1] for _, h in src)
        n = z.shape[0]
        glayer_in = np.zeros((in_hi - in_lo + 1, width))
        lo_i = spans[i][0]
        for k, o in enumerate(layer.offsets):
            s = lo_i + o - in_lo
            glayer_in[s:s + n] += gz[:, k * width:(k + 1) * width]
        col = 0
        for j, h in src:
            d = h.shape[1]
            if j > 0:
                s = in_lo - spans[j][0]
                gh[j][s:s + glayer_in.shape[0]] += glayer_in[:, col:col + d]
            col += d
    return {name: grads[name] for name in model.params}


def sgd_step(model, grads, lr, apply_constraint=True):
    """params - lr * grads; optionally one semi-orthogonal step per B."""
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise TrainingDivergenceError(f"non-finite gradient for {name}")
    params = {}
    for name, p in model.params.items():
        new = p - lr * grads[name] if name in grads else p.copy()
        if apply_constraint and name.endswith(".B"):
            new = semi_orthogonal_step(new)
        params[name] = new
    return AcousticModel(model.config, params)


def pad_features(model, features):
    """Edge-replicate so that output frame k sits at input frame k*subsampling."""
    cfg = model.config
    return np.pad(np.asarray(features, dtype=float),
                  ((cfg.left_context, cfg.right_context), (0, 0)), mode="edge")


# -- serialization ----------------------------------------------------------------------------

_END = "end_header"


def _config_header(cfg):
    lines = [f"input_dim={cfg.input_dim}", f"output_dim={cfg.output_dim}",
             f"dropout={cfg.dropout!r}", f"subsampling={cfg.subsampling}",
             f"num_layers={len(cfg.layers)}"]
    for i, l in enumerate(cfg.layers, 1):
        lines += [f"layer{i}.offsets={','.join(map(str, l.offsets))}",
                  f"layer{i}.hidden={l.hidden}", f"layer{i}.bottleneck={l.bottleneck}",
                  f"layer{i}.skip={'none' if l.skip is None else l.skip}"]
    return lines


def save_model(model):
    header = _config_header(model.config) + [_END]
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode())
    for p in model.params.values():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def load_model(data):
    end = data.find((_END + "\n").encode())
    if end < 0:
        raise ParseError("model header not terminated")
    kv = {}
    for line in data[:end].decode().splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"bad header line {line!r}")
        kv[key] = value
    try:
        layers = []
        for i in range(1, int(kv["num_layers"]) + 1):
            skip = kv[f"layer{i}.skip"]
            layers.append(LayerConfig(
                tuple(int(o) for o in kv[f"layer{i}.offsets"].split(",")),
                int(kv[f"layer{i}.hidden"]), int(kv[f"layer{i}.bottleneck"]),
                None if skip == "none" else int(skip)))
        cfg = ModelConfig(int(kv["input_dim"]), tuple(layers), int(kv["output_dim"]),
                          float(kv["dropout"]), int(kv["subsampling"]))
    except (KeyError, ValueError) as e:
        raise ParseError(f"bad model header: {e}") from None
    body = np.frombuffer(data[end + len(_END) + 1:], dtype="<f8")
    params, pos = {}, 0
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        if pos + n > body.size:
            raise ParseError("model file truncated")
        params[name] = body[pos:pos + n].reshape(shape).copy()
        pos += n
    if pos != body.size:
        raise ParseError("trailing data in model file")
    return AcousticModel(cfg, params)


def write_features(path, feats):
    """Archive of per-utterance float32 matrices keyed by utterance id."""
    np.savez(path, **{k: np.asarray(v, dtype=np.float32) for k, v in feats.items()})


def read_features(path):
    with np.load(path) as z:
        return {k: z[k] for k in z.files}
