"""Two-block CNN: a U-Net-style segmentation block on (R1, R2, PD) and a
reconstruction block that refines SyMVF with the segmentation features.

The network is described by a flat list of :class:`LayerSpec` records wired
together by string tags, executed in order, and differentiated by walking
the list backwards. Parameters live in one flat vector; each layer gets a
view into it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L

KINDS = ("conv3", "conv1", "tconv", "relu", "maxpool", "concat")
PARAM_KINDS = ("conv3", "conv1", "tconv")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    inputs: tuple[str, ...]
    output: str
    channels: int | None = None


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    inputs: tuple[tuple[str, int], ...] = (("relax", 3), ("symvf", 1))
    outputs: tuple[str, str] = ("main", "aux")
    width: int = 8
    levels: int = 3

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "levels": self.levels,
            "inputs": [list(i) for i in self.inputs],
            "outputs": list(self.outputs),
            "layers": [
                {"kind": s.kind, "inputs": list(s.inputs), "output": s.output, "channels": s.channels}
                for s in self.layers
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        layers = tuple(
            LayerSpec(s["kind"], tuple(s["inputs"]), s["output"], s["channels"]) for s in d["layers"]
        )
        return cls(
            layers,
            tuple((n, int(c)) for n, c in d["inputs"]),
            tuple(d["outputs"]),
            int(d["width"]),
            int(d["levels"]),
        )

    def channel_map(self) -> dict[str, int]:
        """Channel count of every tag; raises if a tag is consumed before it exists."""
        ch = dict(self.inputs)
        for s in self.layers:
            if s.kind not in KINDS:
                raise ValueError(f"unknown layer kind {s.kind!r}")
            for t in s.inputs:
                if t not in ch:
                    raise ValueError(f"tag {t!r} consumed before it is produced")
            if s.output in ch:
                raise ValueError(f"tag {s.output!r} produced twice")
            if s.kind in PARAM_KINDS:
                ch[s.output] = s.channels
            elif s.kind == "concat":
                ch[s.output] = sum(ch[t] for t in s.inputs)
            else:
                ch[s.output] = ch[s.inputs[0]]
        for o in self.outputs:
            if o not in ch:
                raise ValueError(f"output {o!r} never produced")
        return ch

    def param_shapes(self) -> list[tuple[int, tuple, tuple]]:
        """``(layer_index, weight_shape, bias_shape)`` for each parametrised layer."""
        ch = self.channel_map()
        shapes = []
        for i, s in enumerate(self.layers):
            cin = ch[s.inputs[0]] if s.inputs else 0
            if s.kind == "conv3":
                shapes.append((i, (3, 3, cin, s.channels), (s.channels,)))
            elif s.kind == "conv1":
                shapes.append((i, (1, 1, cin, s.channels), (s.channels,)))
            elif s.kind == "tconv":
                shapes.append((i, (2, 2, cin, s.channels), (s.channels,)))
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(w)) + int(np.prod(b)) for _, w, b in self.param_shapes())


def two_block_spec(width: int = 8, levels: int = 3) -> NetworkSpec:
    """Segmentation U-Net (widths C, 2C, 4C, ...) plus the SyMVF reconstruction block."""
    if width < 1 or levels < 1:
        raise ValueError("width and levels must be positive")
    ls: list[LayerSpec] = []

    def conv_relu(src, dst, c):
        ls.append(LayerSpec("conv3", (src,), dst + "_pre", c))
        ls.append(LayerSpec("relu", (dst + "_pre",), dst))

    src = "relax"
    skips = []
    for lvl in range(levels):
        c = width * 2 ** lvl
        conv_relu(src, f"enc{lvl}a", c)
        conv_relu(f"enc{lvl}a", f"enc{lvl}", c)
        skips.append(f"enc{lvl}")
        if lvl < levels - 1:
            ls.append(LayerSpec("maxpool", (f"enc{lvl}",), f"pool{lvl}"))
            src = f"pool{lvl}"
    src = f"enc{levels - 1}"
    for lvl in range(levels - 2, -1, -1):
        c = width * 2 ** lvl
        ls.append(LayerSpec("tconv", (src,), f"up{lvl}", c))
        ls.append(LayerSpec("concat", (f"up{lvl}", skips[lvl]), f"cat{lvl}"))
        conv_relu(f"cat{lvl}", f"dec{lvl}a", c)
        conv_relu(f"dec{lvl}a", f"dec{lvl}", c)
        src = f"dec{lvl}"
    seg = src
    ls.append(LayerSpec("conv1", (seg,), "aux", 1))

    ls.append(LayerSpec("concat", ("symvf", seg), "rec_in"))
    conv_relu("rec_in", "rec1", width)
    conv_relu("rec1", "rec2", width)
    ls.append(LayerSpec("concat", ("symvf", "rec2"), "rec2s"))
    conv_relu("rec2s", "rec3", width)
    ls.append(LayerSpec("concat", ("symvf", "rec3"), "rec3s"))
    ls.append(LayerSpec("conv1", ("rec3s",), "main", 1))
    spec = NetworkSpec(tuple(ls), width=width, levels=levels)
    spec.channel_map()
    return spec


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled Gaussian weights (He gain before ReLU, unit gain otherwise), zero biases."""
    rng = np.random.default_rng(seed)
    feeds_relu = {s.inputs[0] for s in spec.layers if s.kind == "relu"}
    chunks = []
    for i, wshape, bshape in spec.param_shapes():
        kh, kw, cin, _ = wshape
        fan_in = cin if spec.layers[i].kind == "tconv" else kh * kw * cin
        gain = 2.0 if spec.layers[i].output in feeds_relu else 1.0
        chunks.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=int(np.prod(wshape))))
        chunks.append(np.zeros(int(np.prod(bshape))))
    return np.concatenate(chunks).astype(dtype)


def param_views(spec: NetworkSpec, flat: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    views = {}
    off = 0
    for i, wshape, bshape in spec.param_shapes():
        nw, nb = int(np.prod(wshape)), int(np.prod(bshape))
        views[i] = (flat[off:off + nw].reshape(wshape), flat[off + nw:off + nw + nb])
        off += nw + nb
    if off != flat.size:
        raise ValueError(f"parameter vector has {flat.size} entries, spec needs {off}")
    return views


@dataclass
class Normalization:
    """Affine maps applied at the network boundary.

    Inputs are standardised per channel (R1, R2, PD, SyMVF order); outputs are
    mapped back to MVI units by ``out * out_scale + out_offset``.
    """

    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    in_sd: np.ndarray = field(default_factory=lambda: np.ones(4))
    out_offset: float = 0.0
    out_scale: float = 1.0

    def to_json(self) -> dict:
        return {
            "in_mean": [float(v) for v in self.in_mean],
            "in_sd": [float(v) for v in self.in_sd],
            "out_offset": float(self.out_offset),
            "out_scale": float(self.out_scale),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["in_mean"], float), np.asarray(d["in_sd"], float),
                   float(d["out_offset"]), float(d["out_scale"]))


def forward(spec: NetworkSpec, params: np.ndarray, relax: np.ndarray, symvf: np.ndarray,
            norm: Normalization | None = None, keep_cache: bool = True):
    """Run the network on NHWC batches.

    Returns ``(main, aux, tape)``; ``tape`` is what :func:`backward` needs and
    is ``None`` when ``keep_cache`` is false.
    """
    if relax.ndim != 4 or symvf.ndim != 4:
        raise ValueError("inputs must be NHWC arrays")
    if relax.shape[:3] != symvf.shape[:3]:
        raise ValueError(f"input shape mismatch: {relax.shape} vs {symvf.shape}")
    expect = dict(spec.inputs)
    if relax.shape[-1] != expect["relax"] or symvf.shape[-1] != expect["symvf"]:
        raise ValueError("wrong input channel counts")
    div = 2 ** (spec.levels - 1)
    if relax.shape[1] % div or relax.shape[2] % div:
        raise ValueError(f"spatial dims must be divisible by {div}")
    dtype = params.dtype
    if norm is not None:
        relax = (relax - norm.in_mean[:3]) / norm.in_sd[:3]
        symvf = (symvf - norm.in_mean[3]) / norm.in_sd[3]
    env = {"relax": relax.astype(dtype, copy=False), "symvf": symvf.astype(dtype, copy=False)}
    views = param_views(spec, params)
    caches = []
    for i, s in enumerate(spec.layers):
        if s.kind in ("conv3", "conv1"):
            out, c = L.conv_forward(env[s.inputs[0]], *views[i])
        elif s.kind == "tconv":
            out, c = L.tconv_forward(env[s.inputs[0]], *views[i])
        elif s.kind == "relu":
            out, c = L.relu_forward(env[s.inputs[0]])
        elif s.kind == "maxpool":
            out, c = L.maxpool_forward(env[s.inputs[0]])
        else:
            out, c = L.concat_forward([env[t] for t in s.inputs])
        env[s.output] = out
        caches.append(c if keep_cache else None)
    main, aux = env[spec.outputs[0]], env[spec.outputs[1]]
    if norm is not None:
        main = main * norm.out_scale + norm.out_offset
        aux = aux * norm.out_scale + norm.out_offset
    tape = (caches, norm) if keep_cache else None
    return main, aux, tape


def backward(spec: NetworkSpec, params: np.ndarray, tape, dmain: np.ndarray, daux: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector."""
    caches, norm = tape
    if norm is not None:
        dmain = dmain * norm.out_scale
        daux = daux * norm.out_scale
    grad = np.zeros_like(params)
    gviews = param_views(spec, grad)
    g = {spec.outputs[0]: dmain.astype(params.dtype, copy=False),
         spec.outputs[1]: daux.astype(params.dtype, copy=False)}

    input_tags = {name for name, _ in spec.inputs}

    def acc(tag, d):
        if tag in g:
            g[tag] = g[tag] + d
        else:
            g[tag] = d

    for i in range(len(spec.layers) - 1, -1, -1):
        s = spec.layers[i]
        d = g.pop(s.output, None)
        if d is None:
            continue
        c = caches[i]
        if s.kind in ("conv3", "conv1"):
            # network inputs need no gradient
            need_dx = s.inputs[0] not in input_tags
            dx, dw, db = L.conv_backward(d, c, need_dx)
            gw, gb = gviews[i]
            gw += dw
            gb += db
            if need_dx:
                acc(s.inputs[0], dx)
        elif s.kind == "tconv":
            dx, dw, db = L.tconv_backward(d, c)
            gw, gb = gviews[i]
            gw += dw
            gb += db
            acc(s.inputs[0], dx)
        elif s.kind == "relu":
            acc(s.inputs[0], L.relu_backward(d, c))
        elif s.kind == "maxpool":
            acc(s.inputs[0], L.maxpool_backward(d, c))
        else:
            for t, dx in zip(s.inputs, L.concat_backward(d, c)):
                acc(t, dx)
    return grad
