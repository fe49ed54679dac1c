"""Rotating layers with interchangeable binding mechanisms.

A rotating feature is an N-dimensional vector per scalar feature: its
magnitude encodes feature presence, its orientation encodes object
affiliation. Dense activations are laid out [B, N, C] and convolutional
ones [B, N, C, H, W]; the rotation axis is always axis 1.

Three mechanisms govern how inputs combine into a layer's magnitudes:

* ``none``   -- plain affine map; magnitude is the norm of the result.
* ``chi``    -- the same weights are applied to the input features and to
  their magnitudes, and the two resulting magnitude terms are averaged,
  which suppresses contributions from inputs of opposing orientation.
* ``cosine`` -- an intermediate output is computed first; every connection's
  weight is then rescaled by the (rescaled) cosine alignment between its
  input vector and that intermediate output.

All mechanisms share the magnitude non-linearity: the output keeps the
pre-activation's orientation while its magnitude passes through
BatchNorm and ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (BatchNormState, ConfigError, ShapeError, Tensor,
                     alloc_tag, batchnorm, clip, conv2d, div, einsum,
                     extract_patches, l2_norm, mul, relu, reshape)

MECHANISMS = ("none", "chi", "cosine")

GATE_ALLOC_TAG = "gate_field"


@dataclass
class RotatingTensor:
    """A tensor with an explicit rotation axis (axis 1) of size ``n_rot``."""

    tensor: Tensor
    n_rot: int

    def __post_init__(self):
        if self.n_rot < 2:
            raise ConfigError(f"rotation dimension must be >= 2, got {self.n_rot}")
        if self.tensor.ndim not in (3, 5):
            raise ShapeError(
                f"rotating tensors are [B,N,C] or [B,N,C,H,W], got {self.tensor.shape}")
        if self.tensor.shape[1] != self.n_rot:
            raise ShapeError(
                f"rotation axis has size {self.tensor.shape[1]}, expected {self.n_rot}")

    @property
    def shape(self):
        return self.tensor.shape

    def magnitude(self, keepdims=False) -> Tensor:
        """L2 norm over the rotation axis (eps-guarded, strictly positive)."""
        return l2_norm(self.tensor, axis=1, keepdims=keepdims)

    def orientation(self) -> Tensor:
        """Unit vectors along the rotation axis wherever magnitude > eps."""
        return div(self.tensor, self.magnitude(keepdims=True))


@dataclass
class BindingParams:
    """Learnable weights of one rotating layer.

    ``w`` is [C_in, C_out] (dense) or [C_in, C_out, K, K] (conv) and is the
    single weight tensor shared by every path of the mechanism. ``b`` is the
    per-rotation-channel bias [N, C_out]; ``b_mag`` is the scalar-per-output
    bias of the chi mechanism's magnitude path. All mechanisms carry the
    same parameter set so swapping mechanisms never changes parameter
    counts; ``b_mag`` simply receives no gradient outside chi binding.
    """

    w: Tensor
    b: Tensor
    b_mag: Tensor
    mechanism: str = "chi"
    cosine_rescale: bool = True

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if self.w.ndim not in (2, 4):
            raise ShapeError(f"weights must be [C_in,C_out] or [C_in,C_out,K,K], got {self.w.shape}")
        if self.b.ndim != 2 or self.b.shape[1] != self.w.shape[1]:
            raise ShapeError(f"bias shape {self.b.shape} inconsistent with weights {self.w.shape}")
        if self.b_mag.shape != (self.w.shape[1],):
            raise ShapeError(f"magnitude bias shape {self.b_mag.shape} must be ({self.w.shape[1]},)")

    @property
    def is_conv(self):
        return self.w.ndim == 4

    @property
    def n_rot(self):
        return self.b.shape[0]

    def parameters(self):
        return [self.w, self.b, self.b_mag]


@dataclass
class CosineGateField:
    """Per-sample alignment scores and the weights rescaled by them.

    ``c`` and ``gated_w`` are [B, C_in, C_out] for dense layers and
    [B, C_in, C_out, H', W', K, K] for convolutions; this per-connection
    field is the dominant memory cost of cosine binding.
    """

    c: Tensor
    gated_w: Tensor


@dataclass
class LayerAux:
    """Intermediate values of one layer application, kept for inspection.

    ``m_bind`` is the pre-normalization magnitude, ``pre_relu`` the
    BatchNorm output feeding ReLU, ``pre_activation`` the vector (psi or z)
    whose orientation the output inherits. ``gates`` is present for cosine
    binding only.
    """

    m_bind: Tensor
    pre_relu: Tensor
    pre_activation: Tensor
    gates: CosineGateField | None = None


def init_binding_params(rng: np.random.Generator, c_in: int, c_out: int, n_rot: int,
                        kernel: int | None = None, mechanism: str = "chi",
                        cosine_rescale: bool = True) -> BindingParams:
    """Uniform Kaiming-style init; biases start at zero."""
    fan_in = c_in * (kernel * kernel if kernel else 1)
    bound = 1.0 / np.sqrt(fan_in)
    wshape = (c_in, c_out, kernel, kernel) if kernel else (c_in, c_out)
    w = Tensor(rng.uniform(-bound, bound, size=wshape), requires_grad=True, op="weight")
    b = Tensor(np.zeros((n_rot, c_out)), requires_grad=True, op="bias")
    b_mag = Tensor(np.zeros(c_out), requires_grad=True, op="bias_mag")
    return BindingParams(w=w, b=b, b_mag=b_mag, mechanism=mechanism,
                         cosine_rescale=cosine_rescale)


def lift_input(image: Tensor, n_rot: int) -> RotatingTensor:
    """Embed [B,1,H,W] pixels into rotating features [B,N,1,H,W].

    Rotation channel 0 carries the pixel value, the remaining channels are
    zero, so the lifted magnitude equals the pixel intensity. Pixel values
    must lie in [0, 1].
    """
    if image.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"lift_input expects [B,1,H,W], got {image.shape}")
    data = image.data
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValueError("input pixel values must lie in [0, 1]")
    b, _, h, w = image.shape
    lifted = np.zeros((b, n_rot, 1, h, w), dtype=data.dtype)
    lifted[:, 0] = data
    return RotatingTensor(Tensor(lifted, op="lift"), n_rot)


# -- shared internals -------------------------------------------------------

def _dense_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """[B,N,C_in] x [C_in,C_out] + bias[N,C_out] -> [B,N,C_out]."""
    out = einsum("bni,io->bno", x, w)
    return out + reshape(b, (1,) + b.shape)


def _conv_affine(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    """Per-rotation-channel convolution of [B,N,C_in,H,W] plus bias."""
    bsz, n, c_in, h, wd = x.shape
    flat = reshape(x, (bsz * n, c_in, h, wd))
    y = conv2d(flat, w, stride=stride, padding=padding)
    y = reshape(y, (bsz, n) + y.shape[1:])
    return y + reshape(b, (1,) + b.shape + (1, 1))


def _magnitude_affine(mags: Tensor, p: BindingParams, stride: int, padding: int) -> Tensor:
    """Apply the layer weights to input magnitudes (the chi path)."""
    if p.is_conv:
        out = conv2d(mags, p.w, stride=stride, padding=padding)
        return out + reshape(p.b_mag, (1, -1, 1, 1))
    return einsum("bi,io->bo", mags, p.w) + reshape(p.b_mag, (1, -1))


def _finish(pre_activation: Tensor, m_bind: Tensor, n_rot: int,
            bn: BatchNormState, train: bool, gates=None):
    """Magnitude non-linearity: orientation(pre) * ReLU(BatchNorm(m_bind))."""
    norm = l2_norm(pre_activation, axis=1, keepdims=True)
    orientation = div(pre_activation, norm)
    pre_relu = batchnorm(m_bind, bn, train)
    mags = relu(pre_relu)
    mshape = (mags.shape[0], 1) + mags.shape[1:]
    out = mul(orientation, reshape(mags, mshape))
    aux = LayerAux(m_bind=m_bind, pre_relu=pre_relu,
                   pre_activation=pre_activation, gates=gates)
    return RotatingTensor(out, n_rot), aux


def _check_input(z_in: RotatingTensor, p: BindingParams):
    conv_in = z_in.tensor.ndim == 5
    if conv_in != p.is_conv:
        raise ShapeError(
            f"layout mismatch: input {z_in.shape} vs weights {p.w.shape}")
    if z_in.shape[2] != p.w.shape[0]:
        raise ShapeError(
            f"channel mismatch: input {z_in.shape} vs weights {p.w.shape}")


# -- binding mechanisms ------------------------------------------------------

def no_bind_forward(z_in: RotatingTensor, p: BindingParams, bn: BatchNormState,
                    train: bool = True, stride: int = 1, padding: int = 0):
    """Ablation without binding: magnitude is simply the norm of psi."""
    return chi_bind_forward(z_in, p, bn, train=train, stride=stride,
                            padding=padding, _mix=(1.0, 0.0))


def chi_bind_forward(z_in: RotatingTensor, p: BindingParams, bn: BatchNormState,
                     train: bool = True, stride: int = 1, padding: int = 0,
                     _mix: tuple[float, float] = (0.5, 0.5)):
    """Apply the shared weights to features and their magnitudes, then average.

    psi is the per-rotation-channel affine map of the input; the magnitude
    term mixes ||psi|| with the affine map of the input magnitudes. The
    ``_mix`` knob exists so the no-binding ablation can share this code by
    dropping the magnitude-path term.
    """
    _check_input(z_in, p)
    w_psi, w_chi = _mix
    if p.is_conv:
        psi = _conv_affine(z_in.tensor, p.w, p.b, stride, padding)
    else:
        psi = _dense_affine(z_in.tensor, p.w, p.b)
    psi_mag = l2_norm(psi, axis=1)
    if w_chi != 0.0:
        in_mag = l2_norm(z_in.tensor, axis=1)
        chi = _magnitude_affine(in_mag, p, stride, padding)
        m_bind = w_psi * psi_mag + w_chi * chi
    else:
        m_bind = w_psi * psi_mag if w_psi != 1.0 else psi_mag
    return _finish(psi, m_bind, z_in.n_rot, bn, train)


def _gate(sc: Tensor, rescale: bool) -> Tensor:
    if rescale:
        return clip(sc * 0.5 + 0.5, 0.0, 1.0)
    return clip(sc, -1.0, 1.0)


def cosine_bind_forward(x: RotatingTensor, p: BindingParams, bn: BatchNormState,
                        train: bool = True, override_gates=None):
    """Dense cosine binding.

    The intermediate output y = W x is computed without gating; each
    connection's weight is then rescaled by the cosine alignment (over the
    rotation axis) between its input vector and y, and the gated weights
    produce the final pre-activation z = sum_i W'_bij x_bni + b. Gates stay
    on the differentiation tape. ``override_gates`` substitutes a constant
    gate field (test hook for the forced-gate comparison).
    """
    _check_input(x, p)
    if p.is_conv:
        raise ShapeError("cosine_bind_forward is the dense entry point; use cosine_bind_conv_forward")
    bsz = x.shape[0]
    xt = x.tensor
    y = einsum("bni,io->bno", xt, p.w)
    if override_gates is not None:
        c = Tensor(np.broadcast_to(np.asarray(override_gates, dtype=xt.dtype),
                                   (bsz,) + p.w.shape).copy(), op="gate_override")
    else:
        xn = l2_norm(xt, axis=1)  # [B, C_in]
        yn = l2_norm(y, axis=1)   # [B, C_out]
        dots = einsum("bni,bno->bio", xt, y)
        denom = mul(reshape(xn, (bsz, -1, 1)), reshape(yn, (bsz, 1, -1)))
        sc = div(dots, denom)
        with alloc_tag(GATE_ALLOC_TAG):
            c = _gate(sc, p.cosine_rescale)
    with alloc_tag(GATE_ALLOC_TAG):
        gated_w = mul(c, reshape(p.w, (1,) + p.w.shape))
    z = einsum("bio,bni->bno", gated_w, xt) + reshape(p.b, (1,) + p.b.shape)
    gates = CosineGateField(c=c, gated_w=gated_w)
    return _finish(z, l2_norm(z, axis=1), x.n_rot, bn, train, gates=gates)


def cosine_bind_conv_forward(x: RotatingTensor, p: BindingParams, bn: BatchNormState,
                             train: bool = True, stride: int = 1, padding: int = 0,
                             override_gates=None):
    """Convolutional cosine binding.

    The inputs of a connection are the individual patch entries: alignment
    is computed between the input vector at every kernel offset and the
    intermediate output at the corresponding output location, giving gate
    and gated-weight fields of shape [B, C_in, C_out, H', W', K, K].
    """
    _check_input(x, p)
    if not p.is_conv:
        raise ShapeError("cosine_bind_conv_forward needs conv weights [C_in,C_out,K,K]")
    bsz, n, c_in, h, wd = x.shape
    c_out, k = p.w.shape[1], p.w.shape[2]
    flat = reshape(x.tensor, (bsz * n, c_in, h, wd))
    patches = extract_patches(flat, k, stride=stride, padding=padding)
    h_out, w_out = patches.shape[2], patches.shape[3]
    patches = reshape(patches, (bsz, n, c_in, h_out, w_out, k, k))

    y = einsum("bnihwkl,iokl->bnohw", patches, p.w)
    if override_gates is not None:
        gshape = (bsz, c_in, c_out, h_out, w_out, k, k)
        c = Tensor(np.broadcast_to(np.asarray(override_gates, dtype=x.tensor.dtype),
                                   gshape).copy(), op="gate_override")
    else:
        xn = l2_norm(patches, axis=1)  # [B, C_in, H', W', K, K]
        yn = l2_norm(y, axis=1)        # [B, C_out, H', W']
        dots = einsum("bnihwkl,bnohw->biohwkl", patches, y)
        denom = mul(reshape(xn, (bsz, c_in, 1, h_out, w_out, k, k)),
                    reshape(yn, (bsz, 1, c_out, h_out, w_out, 1, 1)))
        sc = div(dots, denom)
        with alloc_tag(GATE_ALLOC_TAG):
            c = _gate(sc, p.cosine_rescale)
    with alloc_tag(GATE_ALLOC_TAG):
        gated_w = mul(c, reshape(p.w, (1, c_in, c_out, 1, 1, k, k)))
    z = einsum("biohwkl,bnihwkl->bnohw", gated_w, patches)
    z = z + reshape(p.b, (1, n, c_out, 1, 1))
    gates = CosineGateField(c=c, gated_w=gated_w)
    return _finish(z, l2_norm(z, axis=1), x.n_rot, bn, train, gates=gates)


def bind_forward(z_in: RotatingTensor, p: BindingParams, bn: BatchNormState,
                 train: bool = True, stride: int = 1, padding: int = 0):
    """Dispatch to the configured mechanism (conv or dense by weight rank)."""
    if p.mechanism == "chi":
        return chi_bind_forward(z_in, p, bn, train=train, stride=stride, padding=padding)
    if p.mechanism == "none":
        return no_bind_forward(z_in, p, bn, train=train, stride=stride, padding=padding)
    if p.is_conv:
        return cosine_bind_conv_forward(z_in, p, bn, train=train,
                                        stride=stride, padding=padding)
    return cosine_bind_forward(z_in, p, bn, train=train)
