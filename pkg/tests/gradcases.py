"""Random gradient-check instances for every differentiable primitive.

Each builder takes a numpy Generator and returns ``(fn, point)`` where
``fn`` maps a float64 Tensor to a scalar Tensor. Side inputs are drawn
once per case so that ``fn`` is a fixed function of ``point``.
"""
import numpy as np

from tclseg import autodiff as ad
from tclseg.autodiff import Tensor
from tclseg.config import ModelConfig
from tclseg.dual_encoder import encode_image, init_encoder_params
from tclseg.grounder import MaskSet, compute_masks, gated_block
from tclseg.losses import (anisotropic_tv, area_prior_loss, duplicate_pairs, feature_level_tcl,
                           image_level_tcl, infonce_symmetric)


def _weighted_sum(out, rng):
    """Contract an output with fixed random weights so every element matters."""
    c = Tensor(rng.standard_normal(out.shape))
    return ad.sum_(ad.mul(out, c))


def _proj(rng, shape):
    return rng.standard_normal(shape)


def conv2d_input(rng):
    pad = int(rng.integers(0, 2))
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = Tensor(rng.standard_normal((cout, cin, 3, 3)))
    x = rng.standard_normal((1, cin, 4, 4))
    c = Tensor(rng.standard_normal((1, cout, 4 + 2 * pad - 2, 4 + 2 * pad - 2)))
    return (lambda t: ad.sum_(ad.mul(ad.conv2d(t, k, padding=pad), c))), x


def conv2d_kernel(rng):
    pad = int(rng.integers(0, 2))
    x = Tensor(rng.standard_normal((2, 2, 4, 4)))
    w = rng.standard_normal((2, 2, 3, 3))
    c = Tensor(rng.standard_normal((2, 2, 4 + 2 * pad - 2, 4 + 2 * pad - 2)))
    return (lambda t: ad.sum_(ad.mul(ad.conv2d(x, t, padding=pad), c))), w


def upsample_nearest(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    size = [(6, 6), (5, 7), (9, 4)][int(rng.integers(3))]
    c = Tensor(rng.standard_normal((1, 2) + size))
    return (lambda t: ad.sum_(ad.mul(ad.upsample(t, size=size, mode="nearest"), c))), x


def upsample_bilinear(rng):
    x = rng.standard_normal((2, 3, 3))
    size = [(6, 6), (5, 7), (2, 8)][int(rng.integers(3))]
    c = Tensor(rng.standard_normal((2,) + size))
    return (lambda t: ad.sum_(ad.mul(ad.upsample(t, size=size, mode="bilinear"), c))), x


def l2_normalize(rng):
    axis = int(rng.integers(0, 2))
    x = rng.standard_normal((3, 4)) + 0.1
    c = Tensor(rng.standard_normal((3, 4)))
    return (lambda t: ad.sum_(ad.mul(ad.l2_normalize(t, axis=axis), c))), x


def masked_mean_pool_features(rng):
    m = Tensor(rng.uniform(0.1, 1.0, (2, 3, 3, 3)))
    f = rng.standard_normal((2, 4, 3, 3))
    c = Tensor(rng.standard_normal((2, 3, 4)))
    return (lambda t: ad.sum_(ad.mul(ad.masked_mean_pool(t, m), c))), f


def masked_mean_pool_mask(rng):
    f = Tensor(rng.standard_normal((2, 4, 3, 3)))
    m = rng.uniform(0.1, 1.0, (2, 3, 3, 3))
    c = Tensor(rng.standard_normal((2, 3, 4)))
    return (lambda t: ad.sum_(ad.mul(ad.masked_mean_pool(f, t), c))), m


def sigmoid_tanh_chain(rng):
    x = rng.standard_normal((3, 5)) * 2
    c = Tensor(rng.standard_normal((3, 5)))
    return (lambda t: ad.sum_(ad.mul(ad.tanh(ad.mul(ad.sigmoid(t), 3.0)), c))), x


def softmax_log_chain(rng):
    axis = int(rng.integers(0, 2))
    x = rng.standard_normal((4, 5)) * 2
    c = Tensor(rng.standard_normal((4, 5)))

    def fn(t):
        a = ad.log_softmax(t, axis=axis)
        b = ad.log(ad.softmax(ad.mul(t, 0.5), axis=axis))
        return ad.sum_(ad.mul(ad.add(a, ad.exp(b)), c))

    return fn, x


def gelu_layer_norm_chain(rng):
    x = rng.standard_normal((3, 6))
    g, b = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    c = Tensor(rng.standard_normal((3, 6)))
    return (lambda t: ad.sum_(ad.mul(ad.gelu(ad.layer_norm(t, g, b)), c))), x


def gated_block_input(rng):
    w = Tensor(rng.standard_normal((3, 3, 3, 3)) * 0.3)
    b = Tensor(rng.standard_normal(3) * 0.1)
    g = Tensor(np.asarray(rng.uniform(-1.5, 1.5)))
    x = rng.standard_normal((1, 3, 4, 4))
    c = Tensor(rng.standard_normal((1, 3, 4, 4)))
    return (lambda t: ad.sum_(ad.mul(gated_block(t, w, b, g), c))), x


def gated_block_gate(rng):
    w = Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.3)
    b = Tensor(rng.standard_normal(2) * 0.1)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    c = Tensor(rng.standard_normal((1, 2, 4, 4)))
    g = np.asarray(rng.uniform(-1.5, 1.5))
    return (lambda t: ad.sum_(ad.mul(gated_block(x, w, b, t), c))), g


def mask_head_pixels(rng):
    T = Tensor(ad.l2_normalize(Tensor(rng.standard_normal((3, 4))), axis=-1).data)
    w = Tensor(np.asarray(rng.uniform(1.0, 10.0)))
    b = Tensor(np.asarray(rng.uniform(-1.0, 1.0)))
    vs = rng.standard_normal((2, 4, 3, 3)) * 0.3
    c = Tensor(rng.standard_normal((2, 3, 3, 3)))
    return (lambda t: ad.sum_(ad.mul(compute_masks(t, T, w, b).masks, c))), vs


def mask_head_scale(rng):
    T = Tensor(rng.standard_normal((3, 4)) * 0.5)
    vs = Tensor(rng.standard_normal((2, 4, 3, 3)) * 0.5)
    b = Tensor(np.asarray(rng.uniform(-1.0, 1.0)))
    c = Tensor(rng.standard_normal((2, 3, 3, 3)))
    w = np.asarray(rng.uniform(0.5, 3.0))
    return (lambda t: ad.sum_(ad.mul(compute_masks(vs, T, t, b).masks, c))), w


def infonce_similarity(rng):
    B = int(rng.integers(2, 6))
    lt = Tensor(np.asarray(np.log(rng.uniform(0.2, 1.0))))
    S = rng.uniform(-1, 1, (B, B))
    return (lambda t: infonce_symmetric(t, lt)), S


def infonce_excluding_duplicates(rng):
    B = int(rng.integers(3, 7))
    lt = Tensor(np.asarray(np.log(rng.uniform(0.2, 1.0))))
    excl = duplicate_pairs(rng.integers(0, 2, B))
    S = rng.uniform(-1, 1, (B, B))
    return (lambda t: infonce_symmetric(t, lt, excl)), S


def infonce_temperature(rng):
    B = int(rng.integers(2, 6))
    S = Tensor(rng.uniform(-1, 1, (B, B)))
    lt = np.asarray(np.log(rng.uniform(0.2, 1.0)))
    return (lambda t: infonce_symmetric(S, t)), lt


_TINY = ModelConfig(image_size=16, patch=8, width=8, blocks=1, heads=2, mlp_ratio=2)


def image_level_tcl_logits(rng):
    """Soft relaxation end to end: mask logits -> masked images -> tiny encoder -> InfoNCE."""
    B = 3
    ps = init_encoder_params(_TINY, vocab_size=5, seed=int(rng.integers(1000)), dtype=np.float64)
    images = Tensor(rng.uniform(0, 1, (B, 3, 16, 16)))
    T = Tensor(ad.l2_normalize(Tensor(rng.standard_normal((B, 8))), axis=-1).data)
    noise = rng.standard_normal((B, 16, 16)) * 0.5
    lt = Tensor(np.asarray(np.log(0.5)))

    def enc(x):
        return encode_image(x, ps, _TINY, want_dense=False)[0]

    def fn(t):
        ms = MaskSet(ad.sigmoid(t), t)
        return image_level_tcl(images, ms, T, lt, enc, noise, hard=False)[0]

    return fn, rng.standard_normal((B, B, 16, 16))


def feature_level_tcl_pixels(rng):
    B = int(rng.integers(2, 4))
    T = Tensor(ad.l2_normalize(Tensor(rng.standard_normal((B, 4))), axis=-1).data)
    M = Tensor(rng.uniform(0.05, 1.0, (B, B, 3, 3)))
    lt = Tensor(np.asarray(np.log(0.3)))
    vs = rng.standard_normal((B, 4, 3, 3))
    return (lambda t: feature_level_tcl(t, T, MaskSet(M, M), lt)[0]), vs


def feature_level_tcl_masks(rng):
    B = int(rng.integers(2, 4))
    T = Tensor(ad.l2_normalize(Tensor(rng.standard_normal((B, 4))), axis=-1).data)
    vs = Tensor(rng.standard_normal((B, 4, 3, 3)))
    lt = Tensor(np.asarray(np.log(0.3)))
    m = rng.uniform(0.05, 1.0, (B, B, 3, 3))
    return (lambda t: feature_level_tcl(vs, T, MaskSet(t, t), lt)[0]), m


def area_prior(rng):
    B = int(rng.integers(2, 5))
    m = rng.uniform(0.0, 1.0, (B, B, 3, 4))
    return (lambda t: area_prior_loss(t, 0.4, 0.0)), m


def total_variation(rng):
    x = rng.standard_normal((2, 2, 4, 5))
    return (lambda t: anisotropic_tv(t)), x


CASES = {
    "conv2d_input": conv2d_input,
    "conv2d_kernel": conv2d_kernel,
    "upsample_nearest": upsample_nearest,
    "upsample_bilinear": upsample_bilinear,
    "l2_normalize": l2_normalize,
    "masked_mean_pool_features": masked_mean_pool_features,
    "masked_mean_pool_mask": masked_mean_pool_mask,
    "sigmoid_tanh_chain": sigmoid_tanh_chain,
    "softmax_log_chain": softmax_log_chain,
    "gelu_layer_norm_chain": gelu_layer_norm_chain,
    "gated_block_input": gated_block_input,
    "gated_block_gate": gated_block_gate,
    "mask_head_pixels": mask_head_pixels,
    "mask_head_scale": mask_head_scale,
    "infonce_similarity": infonce_similarity,
    "infonce_temperature": infonce_temperature,
    "infonce_excluding_duplicates": infonce_excluding_duplicates,
    "image_level_tcl_logits": image_level_tcl_logits,
    "feature_level_tcl_pixels": feature_level_tcl_pixels,
    "feature_level_tcl_masks": feature_level_tcl_masks,
    "area_prior": area_prior,
    "total_variation": total_variation,
}

# coordinates compared per case for the larger inputs (all of them otherwise)
MAX_COORDS = 24


def run_case(name, seed):
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    fn, point = CASES[name](rng)
    n = None if np.size(point) <= MAX_COORDS else MAX_COORDS
    return ad.grad_check(fn, point, n_coords=n, seed=seed)
