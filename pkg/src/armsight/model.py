"""Shared-trunk network with mask, joint, base and type heads.

The trunk is four conv3x3+relu+maxpool blocks. The mask head upsamples the
trunk output back to the input resolution through two 3x3 convs, a final
1-channel 1x1 conv and a clamped sigmoid; the ceil-mode pooling overshoot is
cropped away at the end. The three vector heads are two-layer MLPs on the
flattened trunk output; the type head ends in a softmax.

Inputs arrive channels-first (B, 3, H, W) in [0, 1] and are transposed to the
channels-last layout the layer library uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import FormatError, Parameter, ShapeMismatch

_ARCH_KEY = "_arch"
_ARCH_LEN = 14


@dataclass(frozen=True)
class ArchitectureSpec:
    in_h: int = 212
    in_w: int = 256
    in_ch: int = 3
    trunk_widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    mask_widths: tuple[int, int] = (32, 16)
    joint_hidden: int = 256
    base_hidden: int = 64
    type_hidden: int = 32

    def pooled_hw(self) -> tuple[int, int]:
        h, w = self.in_h, self.in_w
        for _ in self.trunk_widths:
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    def flat_dim(self) -> int:
        h, w = self.pooled_hw()
        return h * w * self.trunk_widths[-1]

    def to_vector(self, n_joints: int, n_types: int) -> np.ndarray:
        return np.array([n_joints, n_types, self.in_h, self.in_w, self.in_ch,
                         *self.trunk_widths, *self.mask_widths,
                         self.joint_hidden, self.base_hidden, self.type_hidden], dtype=float)

    @staticmethod
    def from_vector(vec) -> tuple["ArchitectureSpec", int, int]:
        v = [int(x) for x in np.asarray(vec).ravel()]
        if len(v) != _ARCH_LEN:
            raise FormatError(f"architecture record has {len(v)} fields, expected {_ARCH_LEN}")
        spec = ArchitectureSpec(
            in_h=v[2], in_w=v[3], in_ch=v[4],
            trunk_widths=tuple(v[5:9]),
            mask_widths=tuple(v[9:11]),
            joint_hidden=v[11], base_hidden=v[12], type_hidden=v[13],
        )
        return spec, v[0], v[1]


TRUNK_CONV_NAMES = ("trunk_conv1", "trunk_conv2", "trunk_conv3", "trunk_conv4")
MASK_CONV_NAMES = ("mask_conv1", "mask_conv2", "mask_conv3")
FC_NAMES = ("joint_fc1", "joint_fc2", "base_fc1", "base_fc2", "type_fc1", "type_fc2")
# The last two mask convs adapt to robot-specific appearance during transfer;
# everything convolutional below them stays frozen.
TRANSFER_TRAINABLE = set(MASK_CONV_NAMES[1:]) | set(FC_NAMES)


class MultiObjectiveNet:
    """Parameter container plus explicit forward/backward wiring."""

    def __init__(self, spec: ArchitectureSpec, n_joints: int, n_types: int,
                 params: dict[str, Parameter]):
        self.spec = spec
        self.n_joints = n_joints
        self.n_types = n_types
        self.params = params

    # -- construction -------------------------------------------------------

    @staticmethod
    def _conv_param(name, kh, kw, cin, cout, rng) -> list[Parameter]:
        w = ad.uniform_init((kh, kw, cin, cout), kh * kw * cin, rng)
        return [Parameter(name + "_w", w), Parameter(name + "_b", np.zeros(cout))]

    @staticmethod
    def _fc_param(name, din, dout, rng) -> list[Parameter]:
        w = ad.uniform_init((din, dout), din, rng)
        return [Parameter(name + "_w", w), Parameter(name + "_b", np.zeros(dout))]

    @classmethod
    def build_params(cls, spec: ArchitectureSpec, n_joints: int, n_types: int,
                     rng: np.random.Generator) -> dict[str, Parameter]:
        t = spec.trunk_widths
        m = spec.mask_widths
        plist = []
        cin = spec.in_ch
        for i, width in enumerate(t):
            plist += cls._conv_param(f"trunk_conv{i + 1}", 3, 3, cin, width, rng)
            cin = width
        plist += cls._conv_param("mask_conv1", 3, 3, t[-1], m[0], rng)
        plist += cls._conv_param("mask_conv2", 3, 3, m[0], m[1], rng)
        plist += cls._conv_param("mask_conv3", 1, 1, m[1], 1, rng)
        flat = spec.flat_dim()
        plist += cls._fc_param("joint_fc1", flat, spec.joint_hidden, rng)
        plist += cls._fc_param("joint_fc2", spec.joint_hidden, 3 * n_joints, rng)
        plist += cls._fc_param("base_fc1", flat, spec.base_hidden, rng)
        plist += cls._fc_param("base_fc2", spec.base_hidden, 3, rng)
        plist += cls._fc_param("type_fc1", flat, spec.type_hidden, rng)
        plist += cls._fc_param("type_fc2", spec.type_hidden, n_types, rng)
        return {p.name: p for p in plist}

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_layer_names(self) -> set[str]:
        return {name.rsplit("_", 1)[0] for name, p in self.params.items() if p.trainable}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _w(self, layer: str) -> np.ndarray:
        return self.params[layer + "_w"].value

    def _b(self, layer: str) -> np.ndarray:
        return self.params[layer + "_b"].value

    # -- forward ------------------------------------------------------------

    def _check_input(self, images: np.ndarray) -> np.ndarray:
        s = self.spec
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (s.in_ch, s.in_h, s.in_w):
            raise ShapeMismatch(
                f"expected (B, {s.in_ch}, {s.in_h}, {s.in_w}) images, got {x.shape}")
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))

    def forward_trunk(self, images):
        """images: (B, C, H, W) in [0, 1]. Returns (trunk_out, caches)."""
        x = self._check_input(images)
        caches = []
        for i in range(len(self.spec.trunk_widths)):
            name = f"trunk_conv{i + 1}"
            x, c_conv = ad.conv2d_forward(x, self._w(name), self._b(name), pad=1)
            x, c_relu = ad.relu_forward(x)
            x, c_pool = ad.maxpool2_forward(x)
            caches.append((c_conv, c_relu, c_pool))
        return x, caches

    def forward_heads(self, trunk_out):
        """Runs the four heads on a (B, ph, pw, C) trunk output."""
        s = self.spec
        B = trunk_out.shape[0]

        x, c_u1 = ad.upsample2_forward(trunk_out)
        x, c_m1 = ad.conv2d_forward(x, self._w("mask_conv1"), self._b("mask_conv1"), pad=1)
        x, c_r1 = ad.relu_forward(x)
        x, c_u2 = ad.upsample2_forward(x)
        x, c_m2 = ad.conv2d_forward(x, self._w("mask_conv2"), self._b("mask_conv2"), pad=1)
        x, c_r2 = ad.relu_forward(x)
        x, c_u3 = ad.upsample2_forward(x)
        x, c_u4 = ad.upsample2_forward(x)
        x, c_m3 = ad.conv2d_forward(x, self._w("mask_conv3"), self._b("mask_conv3"))
        x, c_crop = ad.crop2d_forward(x, s.in_h, s.in_w)
        mask, c_sig = ad.sigmoid_forward(x)
        mask = mask.reshape(B, s.in_h, s.in_w)

        flat = trunk_out.reshape(B, s.flat_dim())
        j, c_j1 = ad.fully_connected_forward(flat, self._w("joint_fc1"), self._b("joint_fc1"))
        ja, c_jr = ad.relu_forward(j)
        joints, c_j2 = ad.fully_connected_forward(ja, self._w("joint_fc2"), self._b("joint_fc2"))
        bh, c_b1 = ad.fully_connected_forward(flat, self._w("base_fc1"), self._b("base_fc1"))
        ba, c_br = ad.relu_forward(bh)
        base, c_b2 = ad.fully_connected_forward(ba, self._w("base_fc2"), self._b("base_fc2"))
        th, c_t1 = ad.fully_connected_forward(flat, self._w("type_fc1"), self._b("type_fc1"))
        ta, c_tr = ad.relu_forward(th)
        tl, c_t2 = ad.fully_connected_forward(ta, self._w("type_fc2"), self._b("type_fc2"))
        types, c_sm = ad.softmax_forward(tl)

        outputs = (mask, joints, base, types)
        caches = {
            "mask": (c_u1, c_m1, c_r1, c_u2, c_m2, c_r2, c_u3, c_u4, c_m3, c_crop, c_sig),
            "joint": (c_j1, c_jr, c_j2),
            "base": (c_b1, c_br, c_b2),
            "type": (c_t1, c_tr, c_t2, c_sm),
            "shape": trunk_out.shape,
        }
        return outputs, caches

    def forward(self, images):
        """Pure forward pass: (mask_probs, joint_coords, base_coords, type_probs)."""
        trunk_out, _ = self.forward_trunk(images)
        outputs, _ = self.forward_heads(trunk_out)
        return outputs

    # -- backward -----------------------------------------------------------

    def _acc(self, layer: str, dw, db) -> None:
        self.params[layer + "_w"].grad += dw
        self.params[layer + "_b"].grad += db

    def backward_heads(self, caches, d_mask, d_joints, d_base, d_types,
                       need_trunk_grad: bool = True):
        """Accumulates head parameter grads; returns d(trunk_out) or None.

        With `need_trunk_grad` False, gradients stop above the frozen layers
        (mask_conv1 and the trunk), which is exact for transfer training
        because no trainable parameter sits below them.
        """
        B, ph, pw, ct = caches["shape"]
        c_u1, c_m1, c_r1, c_u2, c_m2, c_r2, c_u3, c_u4, c_m3, c_crop, c_sig = caches["mask"]

        g = ad.sigmoid_backward(d_mask.reshape(c_sig[0].shape), c_sig)
        g = ad.crop2d_backward(g, c_crop)
        g, dw, db = ad.conv2d_backward(g, c_m3)
        self._acc("mask_conv3", dw, db)
        g = ad.upsample2_backward(g, c_u4)
        g = ad.upsample2_backward(g, c_u3)
        g = ad.relu_backward(g, c_r2)
        g, dw, db = ad.conv2d_backward(g, c_m2, need_dx=need_trunk_grad)
        self._acc("mask_conv2", dw, db)
        d_trunk = None
        if need_trunk_grad:
            g = ad.upsample2_backward(g, c_u2)
            g = ad.relu_backward(g, c_r1)
            g, dw, db = ad.conv2d_backward(g, c_m1)
            self._acc("mask_conv1", dw, db)
            d_trunk = ad.upsample2_backward(g, c_u1)

        d_flat = None

        def head(dout, c1, cr, c2, fc1, fc2):
            nonlocal d_flat
            g2, dw2, db2 = ad.fully_connected_backward(dout, c2)
            self._acc(fc2, dw2, db2)
            g2 = ad.relu_backward(g2, cr)
            g1, dw1, db1 = ad.fully_connected_backward(g2, c1, need_dx=need_trunk_grad)
            self._acc(fc1, dw1, db1)
            if need_trunk_grad:
                d_flat = g1 if d_flat is None else d_flat + g1

        c_j1, c_jr, c_j2 = caches["joint"]
        head(d_joints, c_j1, c_jr, c_j2, "joint_fc1", "joint_fc2")
        c_b1, c_br, c_b2 = caches["base"]
        head(d_base, c_b1, c_br, c_b2, "base_fc1", "base_fc2")
        c_t1, c_tr, c_t2, c_sm = caches["type"]
        dt = ad.softmax_backward(d_types, c_sm)
        head(dt, c_t1, c_tr, c_t2, "type_fc1", "type_fc2")

        if not need_trunk_grad:
            return None
        return d_trunk + d_flat.reshape(B, ph, pw, ct)

    def backward_trunk(self, caches, d_trunk_out) -> None:
        g = d_trunk_out
        for i in reversed(range(len(self.spec.trunk_widths))):
            c_conv, c_relu, c_pool = caches[i]
            g = ad.maxpool2_backward(g, c_pool)
            g = ad.relu_backward(g, c_relu)
            g, dw, db = ad.conv2d_backward(g, c_conv, need_dx=(i > 0))
            self._acc(f"trunk_conv{i + 1}", dw, db)


def build(n_joints: int, n_types: int, seed: int,
          spec: ArchitectureSpec = ArchitectureSpec()) -> MultiObjectiveNet:
    """Freshly initialized network; all parameters trainable."""
    if n_joints not in (6, 7):
        raise ValueError(f"n_joints must be 6 or 7, got {n_joints}")
    if n_types < 1:
        raise ValueError("need at least one robot type")
    rng = np.random.default_rng(seed)
    params = MultiObjectiveNet.build_params(spec, n_joints, n_types, rng)
    return MultiObjectiveNet(spec, n_joints, n_types, params)


def freeze_for_transfer(net: MultiObjectiveNet) -> MultiObjectiveNet:
    """Freeze the trunk and first mask conv; heads and last two mask convs train."""
    for name, p in net.params.items():
        layer = name.rsplit("_", 1)[0]
        p.trainable = layer in TRANSFER_TRAINABLE
    return net


def adapt_joint_head(net: MultiObjectiveNet, n_joints_new: int, seed: int) -> MultiObjectiveNet:
    """Replace the final joint FC with a freshly seeded layer for a new joint count.

    Every other parameter object is left untouched (bit-identical values).
    """
    if n_joints_new not in (6, 7):
        raise ValueError(f"n_joints must be 6 or 7, got {n_joints_new}")
    rng = np.random.default_rng(seed)
    keep_trainable = net.params["joint_fc2_w"].trainable
    fresh = MultiObjectiveNet._fc_param("joint_fc2", net.spec.joint_hidden, 3 * n_joints_new, rng)
    for p in fresh:
        p.trainable = keep_trainable
        net.params[p.name] = p
    net.n_joints = n_joints_new
    return net


def adapt_type_head(net: MultiObjectiveNet, n_types_new: int, seed: int) -> MultiObjectiveNet:
    """Replace the final type FC for a new class count; everything else untouched."""
    if n_types_new < 1:
        raise ValueError("need at least one robot type")
    rng = np.random.default_rng(seed)
    keep_trainable = net.params["type_fc2_w"].trainable
    fresh = MultiObjectiveNet._fc_param("type_fc2", net.spec.type_hidden, n_types_new, rng)
    for p in fresh:
        p.trainable = keep_trainable
        net.params[p.name] = p
    net.n_types = n_types_new
    return net


def save(net: MultiObjectiveNet, path) -> None:
    """Checkpoint the architecture record plus every parameter tensor."""
    arch = Parameter(_ARCH_KEY, net.spec.to_vector(net.n_joints, net.n_types), trainable=False)
    ad.save_checkpoint([arch] + net.parameters(), path)


def load(path) -> MultiObjectiveNet:
    loaded = ad.load_checkpoint(path)
    if not loaded or loaded[0].name != _ARCH_KEY:
        raise FormatError("checkpoint lacks the architecture record")
    spec, n_joints, n_types = ArchitectureSpec.from_vector(loaded[0].value)
    net = MultiObjectiveNet(spec, n_joints, n_types, {p.name: p for p in loaded[1:]})
    expected = MultiObjectiveNet.build_params(spec, n_joints, n_types, np.random.default_rng(0))
    if set(expected) != set(net.params):
        raise FormatError("checkpoint parameter names do not match the architecture")
    for name, proto in expected.items():
        if net.params[name].value.shape != proto.value.shape:
            raise FormatError(f"tensor {name} has shape {net.params[name].value.shape}, "
                              f"expected {proto.value.shape}")
    return net
