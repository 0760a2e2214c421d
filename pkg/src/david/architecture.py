"""Backbone / attention-branch U-Nets and the two-level attention fusion.

Networks are described declaratively (``NetworkSpec``: an ordered list of
``LayerSpec`` rows, one per table row) and executed by ``Network``.  Skip
pairs are recorded mutually on both rows; the wiring rule is:

* the layer right after an ``up`` row consumes ``concat(up_out, partner_out)``;
* a ``conv`` row whose partner lies *earlier* (``Input <-> Conv20``) consumes
  ``concat(prev_out, partner_out)`` itself.

Every conv is followed by ReLU except the final one, which stays linear.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .engine import functional as F
from .engine.optim import InitSpec, xavier_init
from .engine.tensor import Tensor, as_tensor

BACKBONE_MULTIPLE = 16
ATTENTION_MULTIPLE = 4
RGB = 3


@dataclass
class LayerSpec:
    name: str
    kind: str  # "input" | "conv" | "down" | "up"
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (1, 1)
    skip_partner: str = None
    scaled: bool = True  # False for the RGB / attention output conv

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "out_channels": self.out_channels}
        if self.kind == "conv":
            d.update(kernel=list(self.kernel), stride=list(self.stride), padding=list(self.padding))
        if self.skip_partner:
            d["skip_partner"] = self.skip_partner
        if not self.scaled:
            d["scaled"] = False
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            kind=d["kind"],
            out_channels=int(d["out_channels"]),
            kernel=tuple(d.get("kernel", (3, 3))),
            stride=tuple(d.get("stride", (1, 1))),
            padding=tuple(d.get("padding", (1, 1))),
            skip_partner=d.get("skip_partner"),
            scaled=d.get("scaled", True),
        )


def scale_channels(channels, scale):
    return max(1, int(round(Fraction(channels) * Fraction(scale))))


@dataclass
class NetworkSpec:
    name: str
    in_channels: int
    layers: list
    channel_scale: Fraction = Fraction(1)
    multiple: int = 1  # spatial dims must be divisible by this
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channel_scale = Fraction(self.channel_scale)
        self.validate()

    def validate(self):
        names = {layer.name: layer for layer in self.layers}
        if len(names) != len(self.layers):
            raise ValueError(f"{self.name}: duplicate layer names")
        for layer in self.layers:
            partner = layer.skip_partner
            if partner is None:
                continue
            if partner not in names:
                raise ValueError(f"{self.name}: {layer.name} skips to unknown layer {partner}")
            if names[partner].skip_partner != layer.name:
                raise ValueError(f"{self.name}: skip {layer.name}->{partner} is not mutual")
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")

    def channels(self, layer):
        if layer.kind == "input":
            return self.in_channels
        if layer.kind in ("down", "up"):
            return None  # inherits from its input
        if not layer.scaled:
            return layer.out_channels
        return scale_channels(layer.out_channels, self.channel_scale)

    def wiring(self):
        """Per layer: ``(source_index, skip_index_or_None)``."""
        index = {layer.name: i for i, layer in enumerate(self.layers)}
        wires = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "input":
                wires.append((None, None))
                continue
            skip = None
            prev = self.layers[i - 1]
            if prev.kind == "up" and prev.skip_partner:
                skip = index[prev.skip_partner]
            elif layer.kind == "conv" and layer.skip_partner and index[layer.skip_partner] < i:
                skip = index[layer.skip_partner]
            wires.append((i - 1, skip))
        return wires

    def shape_pass(self, height, width):
        """Symbolic forward: ``[(name, (C, H, W), conv_in_channels_or_None), ...]``."""
        shapes = []
        for layer, (src, skip) in zip(self.layers, self.wiring()):
            if layer.kind == "input":
                shapes.append((layer.name, (self.in_channels, height, width), None))
                continue
            c, h, w = shapes[src][1]
            if skip is not None:
                sc, shh, sww = shapes[skip][1]
                if (shh, sww) != (h, w):
                    raise ValueError(f"{self.name}: skip into {layer.name} joins {h}x{w} with {shh}x{sww}")
                c = c + sc
            cin = None
            if layer.kind == "conv":
                cin = c
                (kh, kw), (sh, sw), (ph, pw) = layer.kernel, layer.stride, layer.padding
                h = F.conv_output_size(h, kh, sh, ph)
                w = F.conv_output_size(w, kw, sw, pw)
                c = self.channels(layer)
            elif layer.kind == "down":
                if h % 2 or w % 2:
                    raise ValueError(f"{self.name}: {layer.name} needs even input, got {h}x{w}")
                h, w = h // 2, w // 2
            elif layer.kind == "up":
                h, w = 2 * h, 2 * w
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            shapes.append((layer.name, (c, h, w), cin))
        return shapes

    @property
    def out_channels(self):
        return self.shape_pass(self.multiple, self.multiple)[-1][1][0]

    def to_dict(self):
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "channel_scale": str(self.channel_scale),
            "multiple": self.multiple,
            "meta": dict(self.meta),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            in_channels=int(d["in_channels"]),
            layers=[LayerSpec.from_dict(x) for x in d["layers"]],
            channel_scale=Fraction(d.get("channel_scale", "1")),
            multiple=int(d.get("multiple", 1)),
            meta=dict(d.get("meta", {})),
        )


def _conv(name, channels, skip=None, scaled=True):
    return LayerSpec(name, "conv", channels, skip_partner=skip, scaled=scaled)


def backbone_spec(frames, channel_scale=1):
    """Layer table of the 20-conv backbone U-Net taking ``frames`` RGB frames."""
    if frames < 1 or frames % 2 == 0:
        raise ValueError(f"backbone needs an odd, positive frame count, got {frames}")
    layers = [
        LayerSpec("Input", "input", frames * RGB, skip_partner="Conv20"),
        _conv("Conv1", 64), _conv("Conv2", 64, "Up4"), LayerSpec("Down1", "down", 64),
        _conv("Conv3", 128), _conv("Conv4", 128, "Up3"), LayerSpec("Down2", "down", 128),
        _conv("Conv5", 256), _conv("Conv6", 256, "Up2"), LayerSpec("Down3", "down", 256),
        _conv("Conv7", 512), _conv("Conv8", 512, "Up1"), LayerSpec("Down4", "down", 512),
        _conv("Conv9", 1024), _conv("Conv10", 1024),
        LayerSpec("Up1", "up", 1024, skip_partner="Conv8"), _conv("Conv11", 512), _conv("Conv12", 512),
        LayerSpec("Up2", "up", 512, skip_partner="Conv6"), _conv("Conv13", 256), _conv("Conv14", 256),
        LayerSpec("Up3", "up", 256, skip_partner="Conv4"), _conv("Conv16", 128), _conv("Conv17", 128),
        LayerSpec("Up4", "up", 128, skip_partner="Conv2"), _conv("Conv18", 64), _conv("Conv19", 64),
        _conv("Conv20", RGB, "Input", scaled=False),
    ]
    return NetworkSpec(
        f"backbone{frames}", frames * RGB, layers, channel_scale,
        multiple=BACKBONE_MULTIPLE, meta={"frames": frames},
    )


def attention_spec(frames, n_outputs, channel_scale=1):
    """Layer table of the shallow (two-down) attention U-Net emitting ``3 * n_outputs`` maps."""
    if frames < 1 or frames % 2 == 0:
        raise ValueError(f"attention branch needs an odd, positive frame count, got {frames}")
    if n_outputs < 1:
        raise ValueError(f"n_outputs must be >= 1, got {n_outputs}")
    layers = [
        LayerSpec("Input", "input", frames * RGB),
        _conv("Conv1", 64), _conv("Conv2", 64, "Up2"), LayerSpec("Down1", "down", 64),
        _conv("Conv3", 128), _conv("Conv4", 128, "Up1"), LayerSpec("Down2", "down", 128),
        _conv("Conv5", 256), _conv("Conv6", 256),
        LayerSpec("Up1", "up", 256, skip_partner="Conv4"), _conv("Conv7", 128), _conv("Conv8", 128),
        LayerSpec("Up2", "up", 128, skip_partner="Conv2"), _conv("Conv9", 64),
        _conv("Conv10", RGB * n_outputs, scaled=False),
    ]
    return NetworkSpec(
        f"attention{frames}x{n_outputs}", frames * RGB, layers, channel_scale,
        multiple=ATTENTION_MULTIPLE, meta={"frames": frames, "n_outputs": n_outputs},
    )


class Network:
    """Executes a ``NetworkSpec``; parameters are xavier-normal weights and zero biases."""

    def __init__(self, spec, rng=None, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(rng)
        self.params = {}
        self._convs = {}
        for layer, (_, _, cin) in zip(spec.layers, spec.shape_pass(spec.multiple, spec.multiple)):
            if layer.kind != "conv":
                continue
            shape = (spec.channels(layer), cin) + tuple(layer.kernel)
            key = layer.name.lower()
            w = Tensor(xavier_init(InitSpec.for_conv(shape), rng, shape, dtype), requires_grad=True)
            b = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True)
            self.params[f"{key}.weight"] = w
            self.params[f"{key}.bias"] = b
            self._convs[layer.name] = (w, b)
        self._last_conv = [layer.name for layer in spec.layers if layer.kind == "conv"][-1]

    @property
    def in_channels(self):
        return self.spec.in_channels

    def parameters(self):
        return dict(self.params)

    def check_input(self, x):
        h, w = x.shape[-2:]
        m = self.spec.multiple
        if h % m or w % m:
            raise ValueError(f"{self.spec.name}: spatial size {h}x{w} must be a multiple of {m}")
        if x.shape[-3] != self.spec.in_channels:
            raise ValueError(f"{self.spec.name}: expected {self.spec.in_channels} input channels, got {x.shape[-3]}")

    def forward(self, x, trace=None):
        x = as_tensor(x)
        self.check_input(x)
        outs = []
        for layer, (src, skip) in zip(self.spec.layers, self.spec.wiring()):
            if layer.kind == "input":
                outs.append(x)
                continue
            h = outs[src]
            if skip is not None:
                h = F.concat_channels(h, outs[skip])
            if layer.kind == "conv":
                w, b = self._convs[layer.name]
                (sh, sw), (ph, pw) = layer.stride, layer.padding
                h = F.conv2d(h, w, b, stride=(sh, sw), padding=(ph, pw))
                if layer.name != self._last_conv:
                    h = F.relu(h)
            elif layer.kind == "down":
                h = F.maxpool2x2(h)
            else:
                h = F.bilinear_upsample2x(h)
            outs.append(h)
            if trace is not None:
                trace.append((layer.name, h.shape))
        return outs[-1]

    __call__ = forward


class BackboneBranch(Network):
    def __init__(self, frames, channel_scale=1, rng=None, dtype=np.float32, spec=None):
        super().__init__(spec or backbone_spec(frames, channel_scale), rng, dtype)
        self.temporal_width = int(self.spec.meta.get("frames", frames))
        if self.spec.in_channels != self.temporal_width * RGB:
            raise ValueError("backbone in_channels must equal temporal_width * 3")

    def predict_stack(self, stack):
        """Run on a frame stack ``(B, T, 3, H, W)`` using its centred window."""
        return self.forward(stack_to_input(slice_temporal_window(stack, self.temporal_width)))


def build_backbone(frames, channel_scale=1, rng=None, dtype=np.float32):
    return BackboneBranch(frames, channel_scale, rng, dtype)


def build_attention_branch(frames, n_outputs, channel_scale=1, rng=None, dtype=np.float32):
    return Network(attention_spec(frames, n_outputs, channel_scale), rng, dtype)


# -- frame stacks ---------------------------------------------------------------

def slice_temporal_window(stack, width):
    """Centre ``width`` frames of a stack shaped ``(..., T, 3, H, W)``."""
    total = stack.shape[-4]
    if width < 1 or width % 2 == 0:
        raise ValueError(f"temporal window must be odd and positive, got {width}")
    if width > total:
        raise ValueError(f"temporal window {width} exceeds stack of {total} frames")
    lo = (total - width) // 2
    index = (Ellipsis, slice(lo, lo + width), slice(None), slice(None), slice(None))
    if isinstance(stack, Tensor):
        return stack if width == total else F.getitem(stack, index)
    return stack[index]


def stack_to_input(stack):
    """``(B, T, 3, H, W)`` -> network input ``(B, 3T, H, W)`` (frames in temporal order)."""
    shape = stack.shape
    if len(shape) not in (4, 5) or shape[-3] != RGB:
        raise ValueError(f"frame stack must be (B, T, 3, H, W) or (T, 3, H, W), got {shape}")
    new = shape[:-4] + (shape[-4] * RGB,) + shape[-2:]
    if isinstance(stack, Tensor):
        return F.reshape(stack, new)
    return Tensor(np.ascontiguousarray(stack).reshape(new))


def attention_fuse(outputs, logits):
    """Softmax-weighted per-pixel, per-colour combination of K estimates.

    ``outputs`` is a list of K tensors ``(B, 3, H, W)``; ``logits`` is
    ``(B, 3K, H, W)`` ordered estimate-major.  Returns ``(fused, weights)``
    with ``weights`` shaped ``(B, K, 3, H, W)``.
    """
    k = len(outputs)
    logits = as_tensor(logits)
    b, c, h, w = logits.shape
    if c != RGB * k:
        raise ValueError(f"attention produced {c} maps for {k} estimates (need {RGB * k})")
    weights = F.softmax_over_axis(F.reshape(logits, (b, k, RGB, h, w)), axis=1)
    stacked = F.stack(outputs, axis=1)
    fused = F.sum_over_axis(F.elementwise_mul(weights, stacked), axis=1)
    return fused, weights


def _seed_sequence(rng):
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(2**63)))
    if isinstance(rng, np.random.SeedSequence):
        return rng
    return np.random.SeedSequence(rng)


def _as_batched_stack(stack):
    if stack.ndim == 4:
        return stack[None], True
    if stack.ndim != 5:
        raise ValueError(f"frame stack must be (B, T, 3, H, W) or (T, 3, H, W), got {stack.shape}")
    return stack, False


def _unbatch(t):
    return F.reshape(t, t.shape[1:])


class InternalAttentionModule:
    """N backbone branches (1, 3, ..., 2N-1 frames) fused by an attention branch."""

    def __init__(self, n_branches=4, channel_scale=1, blur_level_tag=7, rng=None, dtype=np.float32,
                 attention_scale=None, branches=None, attention=None):
        seeds = _seed_sequence(rng).spawn(n_branches + 1)
        self.blur_level_tag = int(blur_level_tag)
        self.n_branches = n_branches
        self.stack_width = 2 * n_branches - 1
        attention_scale = channel_scale if attention_scale is None else attention_scale
        self.branches = branches or [
            BackboneBranch(2 * i + 1, channel_scale, np.random.default_rng(seeds[i]), dtype) for i in range(n_branches)
        ]
        self.attention = attention or build_attention_branch(
            self.stack_width, n_branches, attention_scale, np.random.default_rng(seeds[-1]), dtype
        )
        if len(self.branches) != n_branches:
            raise ValueError("branch count mismatch")

    def parameters(self):
        params = {}
        for i, br in enumerate(self.branches):
            params.update({f"branch{i}.{k}": v for k, v in br.params.items()})
        params.update({f"attention.{k}": v for k, v in self.attention.params.items()})
        return params

    def backbone_parameter_names(self):
        return {k for k in self.parameters() if k.startswith("branch")}

    def check_stack(self, stack):
        h, w = stack.shape[-2:]
        if h % BACKBONE_MULTIPLE or w % BACKBONE_MULTIPLE:
            raise ValueError(f"spatial size {h}x{w} must be a multiple of {BACKBONE_MULTIPLE}")
        if stack.shape[-4] < self.stack_width:
            raise ValueError(f"stack has {stack.shape[-4]} frames, module needs {self.stack_width}")

    def forward(self, stack):
        """Returns ``(sharp, weights, branch_outputs)``."""
        stack, single = _as_batched_stack(stack)
        self.check_stack(stack)
        stack = slice_temporal_window(stack, self.stack_width)
        outputs = [br.forward(stack_to_input(slice_temporal_window(stack, br.temporal_width))) for br in self.branches]
        logits = self.attention.forward(stack_to_input(stack))
        sharp, weights = attention_fuse(outputs, logits)
        if single:
            return _unbatch(sharp), _unbatch(weights), [_unbatch(o) for o in outputs]
        return sharp, weights, outputs

    def predict_stack(self, stack):
        return self.forward(stack)[0]

    def config(self):
        return {
            "kind": "internal",
            "blur_level_tag": self.blur_level_tag,
            "branches": [br.spec.to_dict() for br in self.branches],
            "attention": self.attention.spec.to_dict(),
        }


def internal_forward(stack, module):
    return module.forward(stack)


class DavidModel:
    """M internal attention modules fused by an external attention branch."""

    def __init__(self, blur_levels=(3, 7, 11), n_branches=4, channel_scale=1, rng=None, dtype=np.float32,
                 attention_scale=None, internal_modules=None, external=None):
        seeds = _seed_sequence(rng).spawn(len(blur_levels) + 1)
        self.internal_modules = internal_modules or [
            InternalAttentionModule(n_branches, channel_scale, tag, seeds[j], dtype,
                                    attention_scale=attention_scale)
            for j, tag in enumerate(blur_levels)
        ]
        self.n_branches = self.internal_modules[0].n_branches
        self.stack_width = max(m.stack_width for m in self.internal_modules)
        attention_scale = channel_scale if attention_scale is None else attention_scale
        self.external = external or build_attention_branch(
            self.stack_width, len(self.internal_modules), attention_scale, np.random.default_rng(seeds[-1]), dtype
        )

    @property
    def blur_levels(self):
        return [m.blur_level_tag for m in self.internal_modules]

    def parameters(self):
        params = {}
        for j, mod in enumerate(self.internal_modules):
            params.update({f"internal{j}.{k}": v for k, v in mod.parameters().items()})
        params.update({f"external.{k}": v for k, v in self.external.params.items()})
        return params

    def forward(self, stack):
        """Returns ``(final, ext_weights, internal_results)``.

        ``internal_results[j]`` is the ``(sharp, weights, branch_outputs)``
        triple of internal module ``j``.
        """
        stack, single = _as_batched_stack(stack)
        self.internal_modules[0].check_stack(stack)
        stack = slice_temporal_window(stack, self.stack_width)
        results = [mod.forward(stack) for mod in self.internal_modules]
        logits = self.external.forward(stack_to_input(stack))
        final, weights = attention_fuse([r[0] for r in results], logits)
        if single:
            results = [(_unbatch(s), _unbatch(w), [_unbatch(o) for o in outs]) for s, w, outs in results]
            return _unbatch(final), _unbatch(weights), results
        return final, weights, results

    def predict_stack(self, stack):
        return self.forward(stack)[0]

    def config(self):
        return {
            "kind": "david",
            "internal": [m.config() for m in self.internal_modules],
            "external": self.external.spec.to_dict(),
        }


def external_forward(stack, model):
    return model.forward(stack)


def backbone_config(branch):
    return {"kind": "backbone", "spec": branch.spec.to_dict()}


def model_config(model):
    if isinstance(model, BackboneBranch):
        return backbone_config(model)
    return model.config()


def model_from_config(cfg, dtype=np.float32):
    """Rebuild an (uninitialised-weights) model from its architecture description."""
    kind = cfg["kind"]
    if kind == "backbone":
        spec = NetworkSpec.from_dict(cfg["spec"])
        return BackboneBranch(spec.meta["frames"], spec.channel_scale, 0, dtype, spec=spec)
    if kind == "internal":
        branches = []
        for d in cfg["branches"]:
            spec = NetworkSpec.from_dict(d)
            branches.append(BackboneBranch(spec.meta["frames"], spec.channel_scale, 0, dtype, spec=spec))
        attention = Network(NetworkSpec.from_dict(cfg["attention"]), 0, dtype)
        return InternalAttentionModule(len(branches), blur_level_tag=cfg["blur_level_tag"], dtype=dtype,
                                       branches=branches, attention=attention)
    if kind == "david":
        modules = [model_from_config(c, dtype) for c in cfg["internal"]]
        external = Network(NetworkSpec.from_dict(cfg["external"]), 0, dtype)
        return DavidModel(blur_levels=[m.blur_level_tag for m in modules], n_branches=modules[0].n_branches,
                          dtype=dtype, internal_modules=modules, external=external)
    raise ValueError(f"unknown model kind {kind!r}")
