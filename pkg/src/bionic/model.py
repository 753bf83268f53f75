"""BioNIC network, the matched CNN baseline, and Hebbian plasticity.

Forward pipeline (each stage replaced by identity when its toggle is off)::

    conv1 -> lateral inhibition -> ReLU -> conv2 -> ReLU -> maxpool2
          -> channel attention -> spatial attention -> maxpool2 -> flatten
    projection -> LayerNorm
    for each biological layer k = A..D:
        pre   = h                    (A)   |  (W_k * M_k) h + b_k   (B..D)
        comb  = pre + (U_k * N_k) pre + c_k
        h     = ReLU(LayerNorm(comb * s_k)) [+ noise in training]
    LayerNorm -> classifier
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .connectome import ConnectivityMasks, FormatError, LAYER_NAMES, COLUMN_LAYER_SIZES
from .core import (Parameter, RngStream, ShapeError, Tensor, avg_pool2d, concat, conv2d, gaussian_noise,
                   global_avg_pool, layer_norm, linear, max_pool2d, relu, sigmoid, tmax)
from .core.tensor import reshape

TOGGLES = ("use_conv_stem", "use_lateral_inhibition", "use_attention", "use_masks", "use_intra_layer",
           "use_graded_inhibition", "use_synaptic_noise", "use_layer_norm", "use_hebbian")


@dataclass
class BioNicConfig:
    use_conv_stem: bool = True
    use_lateral_inhibition: bool = True
    use_attention: bool = True
    use_masks: bool = True
    use_intra_layer: bool = True
    use_graded_inhibition: bool = True
    use_synaptic_noise: bool = True
    use_layer_norm: bool = True
    use_hebbian: bool = True
    lateral_alpha: float = 0.3
    noise_sigma: float = 0.06
    hebb_lr: float = 5e-4
    home_lr: float = 5e-4
    f_target: float = 0.35
    inhib_eps: float = 1e-6
    layer_sizes: Tuple[int, ...] = COLUMN_LAYER_SIZES
    image_size: int = 48
    conv1_channels: int = 8
    conv2_channels: int = 16
    attention_hidden: int = 2
    n_classes: int = 7

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 < self.f_target < 1:
            raise ValueError(f"f_target must lie in (0, 1), got {self.f_target}")
        if len(self.layer_sizes) != 4:
            raise ValueError(f"expected four layer sizes, got {self.layer_sizes}")
        if self.use_conv_stem and self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4 for the two 2x2 pools, got {self.image_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BioNicConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def baseline(cls, **overrides) -> "BioNicConfig":
        flags = {t: False for t in TOGGLES}
        flags["use_conv_stem"] = True
        flags.update(overrides)
        return cls(**flags)


def inhibition_scaling(counts: np.ndarray, alpha_raw: Tensor, eps: float = 1e-6) -> Tensor:
    """``s = 1 - sigmoid(alpha_raw) * I / (max(I) + eps)``."""
    counts = np.asarray(counts, dtype=alpha_raw.dtype)
    top = counts.max() if counts.size else 0.0
    normalized = Tensor(counts / (top + eps), dtype=alpha_raw.dtype)
    return 1.0 - sigmoid(alpha_raw) * normalized


def lateral_inhibition(h: Tensor, alpha: float) -> Tensor:
    """Subtract ``alpha`` times the 3x3 same-padded local mean."""
    if alpha == 0:
        return h
    return h - avg_pool2d(h, 3, stride=1, padding=1) * alpha


def channel_attention(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    z = global_avg_pool(x)
    s = sigmoid(linear(relu(linear(z, w1, b1)), w2, b2))
    return x * reshape(s, s.shape + (1, 1))


def spatial_attention(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel channel mean and max -> 3x3 conv -> sigmoid gate."""
    pooled = concat([x.mean(axis=1, keepdims=True), tmax(x, axis=1, keepdims=True)], axis=1)
    gate = sigmoid(conv2d(pooled, weight, bias, stride=1, padding=weight.shape[-1] // 2))
    return x * gate


# -- Hebbian plasticity ----------------------------------------------------------

def normalize_activity(a: np.ndarray) -> np.ndarray:
    """Min-max scale a batch of activations to [0, 1]; constant input maps to 0."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if not hi > lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def hebbian_delta(pre: np.ndarray, post: np.ndarray, hebb_lr: float, home_lr: float, f_target: float,
                  mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Weight change for normalized (B, n_pre) / (B, n_post) activity.

    ``dw[i, j] = hebb_lr * mean_b(post[b, i] * pre[b, j]) - home_lr * (mean_b(post[b, i]) - f_target)``
    """
    pre = np.atleast_2d(np.asarray(pre, dtype=np.float64))
    post = np.atleast_2d(np.asarray(post, dtype=np.float64))
    corr = post.T @ pre / pre.shape[0]
    rate = post.mean(axis=0)
    dw = hebb_lr * corr - home_lr * (rate - f_target)[:, None]
    if mask is not None:
        dw = np.where(mask, dw, 0.0)
    return dw


def hebbian_update(weight: Parameter, pre_act: np.ndarray, post_act: np.ndarray, cfg: BioNicConfig) -> np.ndarray:
    dw = hebbian_delta(normalize_activity(pre_act), normalize_activity(post_act), cfg.hebb_lr, cfg.home_lr,
                       cfg.f_target, weight.mask)
    weight.data = (weight.data + dw).astype(weight.dtype)
    weight.enforce_mask()
    return dw


# -- the network -----------------------------------------------------------------

class BioNicModel:
    def __init__(self, config: BioNicConfig, masks: Optional[ConnectivityMasks] = None,
                 rng: Optional[RngStream] = None, dtype=np.float32):
        self.config = config
        if masks is None:
            masks = ConnectivityMasks.dense(config.layer_sizes)
        if tuple(masks.layer_sizes) != config.layer_sizes:
            raise ShapeError(f"masks are for layers {masks.layer_sizes}, config says {config.layer_sizes}")
        self.masks = masks
        self.dtype = dtype
        self.params: Dict[str, Parameter] = {}
        self.inhibitory = [np.asarray(v, dtype=np.int64) for v in masks.inhibitory]
        self.last_activations: List[np.ndarray] = []
        self._build(rng or RngStream(0, "init"))

    # construction
    def _add(self, name, shape=None, value=None, fan_in=None, rng=None, mask=None, decay_exempt=False):
        if value is None:
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, shape)
        self.params[name] = Parameter(np.asarray(value, dtype=self.dtype), mask=mask, decay_exempt=decay_exempt,
                                      dtype=self.dtype, name=name)

    def _weight_bias(self, name, shape, fan_in, rng, mask=None):
        self._add(f"{name}.weight", shape, fan_in=fan_in, rng=rng, mask=mask)
        self._add(f"{name}.bias", value=np.zeros(shape[0]))

    def _norm(self, name, n):
        self._add(f"{name}.gain", value=np.ones(n), decay_exempt=True)
        self._add(f"{name}.bias", value=np.zeros(n), decay_exempt=True)

    def _build(self, rng: RngStream) -> None:
        c = self.config
        sizes = c.layer_sizes
        if c.use_conv_stem:
            c1, c2 = c.conv1_channels, c.conv2_channels
            self._weight_bias("conv1", (c1, 1, 3, 3), 9, rng)
            self._weight_bias("conv2", (c2, c1, 3, 3), 9 * c1, rng)
            if c.use_attention:
                self._weight_bias("channel_att.fc1", (c.attention_hidden, c2), c2, rng)
                self._weight_bias("channel_att.fc2", (c2, c.attention_hidden), c.attention_hidden, rng)
                self._weight_bias("spatial_att.conv", (1, 2, 3, 3), 18, rng)
            flat = c2 * (c.image_size // 4) ** 2
        else:
            flat = c.image_size ** 2
        self.flat_features = flat
        self._weight_bias("proj", (sizes[0], flat), flat, rng)
        if c.use_layer_norm:
            self._norm("ln_proj", sizes[0])
        for k, name in enumerate(LAYER_NAMES):
            if k > 0:
                mask = self.masks.inter[k - 1] if c.use_masks else None
                self._weight_bias(f"inter_{LAYER_NAMES[k - 1]}{name}", (sizes[k], sizes[k - 1]), sizes[k - 1], rng, mask)
            if c.use_intra_layer:
                mask = self.masks.intra[k] if c.use_masks else None
                self._weight_bias(f"intra_{name}", (sizes[k], sizes[k]), sizes[k], rng, mask)
            if c.use_graded_inhibition:
                self._add(f"inhib_{name}.alpha", value=np.zeros(1), decay_exempt=True)
            if c.use_layer_norm:
                self._norm(f"ln_{name}", sizes[k])
        if c.use_layer_norm:
            self._norm("ln_out", sizes[-1])
        self._weight_bias("classifier", (c.n_classes, sizes[-1]), sizes[-1], rng)

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def to_dtype(self, dtype) -> "BioNicModel":
        self.dtype = dtype
        for p in self.params.values():
            p.astype(dtype)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
            p.enforce_mask()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def inter_layer_weights(self) -> List[Parameter]:
        return [self.params[f"inter_{LAYER_NAMES[k - 1]}{LAYER_NAMES[k]}.weight"] for k in range(1, 4)]

    # forward
    def _p(self, name):
        return self.params[name]

    def features(self, x: Tensor) -> Tensor:
        c = self.config
        if c.use_conv_stem:
            h = conv2d(x, self._p("conv1.weight"), self._p("conv1.bias"), stride=1, padding=1)
            if c.use_lateral_inhibition:
                h = lateral_inhibition(h, c.lateral_alpha)
            h = relu(h)
            h = relu(conv2d(h, self._p("conv2.weight"), self._p("conv2.bias"), stride=1, padding=1))
            h = max_pool2d(h, 2)
            if c.use_attention:
                h = channel_attention(h, self._p("channel_att.fc1.weight"), self._p("channel_att.fc1.bias"),
                                      self._p("channel_att.fc2.weight"), self._p("channel_att.fc2.bias"))
                h = spatial_attention(h, self._p("spatial_att.conv.weight"), self._p("spatial_att.conv.bias"))
            h = max_pool2d(h, 2)
        else:
            h = x
        return reshape(h, (h.shape[0], -1))

    def forward(self, x: Tensor, mode: str = "eval", rng: Optional[RngStream] = None) -> Tensor:
        c = self.config
        side = c.image_size
        if x.ndim != 4 or x.shape[1:] != (1, side, side):
            raise ShapeError(f"expected batch of shape (B, 1, {side}, {side}), got {x.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        noisy = mode == "train" and c.use_synaptic_noise and c.noise_sigma > 0
        if noisy and rng is None:
            raise ValueError("train-mode forward with synaptic noise needs an rng")

        h = linear(self.features(x), self._p("proj.weight"), self._p("proj.bias"))
        if c.use_layer_norm:
            h = layer_norm(h, self._p("ln_proj.gain"), self._p("ln_proj.bias"))
        acts = []
        for k, name in enumerate(LAYER_NAMES):
            if k == 0:
                pre = h
            else:
                tag = f"inter_{LAYER_NAMES[k - 1]}{name}"
                pre = linear(h, self._p(f"{tag}.weight"), self._p(f"{tag}.bias"))
            comb = pre
            if c.use_intra_layer:
                comb = pre + linear(pre, self._p(f"intra_{name}.weight"), self._p(f"intra_{name}.bias"))
            if c.use_graded_inhibition:
                comb = comb * inhibition_scaling(self.inhibitory[k], self._p(f"inhib_{name}.alpha"), c.inhib_eps)
            if c.use_layer_norm:
                comb = layer_norm(comb, self._p(f"ln_{name}.gain"), self._p(f"ln_{name}.bias"))
            h = relu(comb)
            if noisy:
                h = h + gaussian_noise(h.shape, c.noise_sigma, rng, dtype=h.dtype)
            acts.append(h.data)
        self.last_activations = acts
        if c.use_layer_norm:
            h = layer_norm(h, self._p("ln_out.gain"), self._p("ln_out.bias"))
        return linear(h, self._p("classifier.weight"), self._p("classifier.bias"))

    __call__ = forward

    def apply_hebbian(self) -> List[np.ndarray]:
        """Hebbian/homeostatic step on the inter-layer weights from the last forward."""
        if not self.last_activations:
            raise RuntimeError("apply_hebbian needs a preceding forward pass")
        acts = self.last_activations
        return [hebbian_update(w, acts[k - 1], acts[k], self.config)
                for k, w in enumerate(self.inter_layer_weights(), start=1)]


def build_standard_baseline(layer_sizes: Sequence[int] = COLUMN_LAYER_SIZES, rng: Optional[RngStream] = None,
                            **overrides) -> BioNicModel:
    """Same conv stem and widths, dense unmasked stack, no bio-inspired stages."""
    cfg = BioNicConfig.baseline(layer_sizes=tuple(layer_sizes), **overrides)
    return BioNicModel(cfg, ConnectivityMasks.dense(cfg.layer_sizes), rng)


def parameter_count(model: BioNicModel, include_masked: bool = True) -> Dict[str, int]:
    """Trainable scalars per module, plus ``total``."""
    counts: Dict[str, int] = {}
    for name, p in model.params.items():
        module = name.rsplit(".", 1)[0]
        n = p.size if (include_masked or p.mask is None) else int(p.mask.sum())
        counts[module] = counts.get(module, 0) + n
    counts["total"] = sum(counts.values())
    return counts


# -- checkpoint container -------------------------------------------------------

CKPT_MAGIC = b"BNCK"
CKPT_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(model: BioNicModel, path, optimizer=None, meta: Optional[dict] = None) -> None:
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True)
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), _pack_str(header), _pack_str(model.config.digest()),
           _pack_str(model.masks.digest()), struct.pack("<I", len(model.params))]

    def blob(name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        return _pack_str(name) + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()

    for name, p in model.params.items():
        out.append(blob(name, p.data))
    if optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        st = optimizer.state
        out.append(struct.pack("<BQd", 1, st.step, st.lr))
        for i, (name, p) in enumerate(model.params.items()):
            m = st.m.get(i, np.zeros_like(p.data))
            v = st.v.get(i, np.zeros_like(p.data))
            out.append(blob(f"{name}.m", m) + blob(f"{name}.v", v))
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, fmt: str):
        try:
            vals = struct.unpack_from(fmt, self.blob, self.pos)
        except struct.error as exc:
            raise FormatError(f"{self.path}: truncated checkpoint") from exc
        self.pos += struct.calcsize(fmt)
        return vals

    def string(self) -> str:
        (n,) = self.take("<I")
        s = self.blob[self.pos:self.pos + n].decode()
        self.pos += n
        return s

    def array(self) -> Tuple[str, np.ndarray]:
        name = self.string()
        (ndim,) = self.take("<B")
        shape = self.take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        if self.pos + 4 * count > len(self.blob):
            raise FormatError(f"{self.path}: truncated tensor {name}")
        arr = np.frombuffer(self.blob, dtype="<f4", count=count, offset=self.pos).reshape(shape).copy()
        self.pos += 4 * count
        return name, arr


def read_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    r = _Reader(blob, path)
    r.pos = 4
    (version,) = r.take("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(r.string())
    config_digest, mask_digest = r.string(), r.string()
    (n,) = r.take("<I")
    params = dict(r.array() for _ in range(n))
    (has_opt,) = r.take("<B")
    optimizer = None
    if has_opt:
        step, lr = r.take("<Qd")
        moments = {}
        for _ in range(n):
            (mn, m), (_, v) = r.array(), r.array()
            moments[mn[:-2]] = (m, v)
        optimizer = {"step": step, "lr": lr, "moments": moments}
    return {"config": header["config"], "meta": header["meta"], "config_digest": config_digest,
            "mask_digest": mask_digest, "params": params, "optimizer": optimizer}


def load_checkpoint(path, masks: ConnectivityMasks, optimizer=None) -> Tuple[BioNicModel, dict]:
    """Rebuild a model from ``path``; refuses a connectome whose digest differs."""
    ckpt = read_checkpoint(path)
    if masks.digest() != ckpt["mask_digest"]:
        raise ValueError(f"{path}: checkpoint was trained against connectome {ckpt['mask_digest']}, "
                         f"got {masks.digest()}")
    cfg = BioNicConfig.from_dict(ckpt["config"])
    if cfg.digest() != ckpt["config_digest"]:
        raise FormatError(f"{path}: config digest mismatch")
    model = BioNicModel(cfg, masks)
    model.load_state_dict(ckpt["params"])
    if optimizer is not None and ckpt["optimizer"] is not None:
        st = optimizer.state
        st.step, st.lr = ckpt["optimizer"]["step"], ckpt["optimizer"]["lr"]
        for i, name in enumerate(model.params):
            m, v = ckpt["optimizer"]["moments"][name]
            st.m[i], st.v[i] = m.astype(model.dtype), v.astype(model.dtype)
    return model, ckpt
