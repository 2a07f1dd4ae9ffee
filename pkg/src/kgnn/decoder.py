"""Energy-based triple scoring (lower energy = more plausible).

All scorers take row-batched tensors: ``e_h``, ``e_r``, ``e_t`` of shape
``(..., d)`` that broadcast against each other. DistMult's similarity is
negated so the same margin objective applies to every decoder.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConstraintError, DimensionError
from .params import DecoderKind, ModelSpec, apply_constraints

post_step_constraints = apply_constraints


def _norm(x, norm):
    if norm == "L1":
        return ad.l1_norm(x)
    if norm == "L2":
        return ad.l2_norm(x)
    raise ValueError(f"unknown norm {norm!r}")


def _check_dims(*ts):
    dims = {ad.as_tensor(t).shape[-1] for t in ts}
    if len(dims) != 1:
        raise DimensionError(f"embedding dimensions disagree: {sorted(dims)}")


def score_transE(e_h, e_r, e_t, norm="L2") -> Tensor:
    _check_dims(e_h, e_r, e_t)
    return _norm(ad.sub(ad.add(e_h, e_r), e_t), norm)


def project_hyperplane(e, w_r) -> Tensor:
    """``e - (w_r . e) w_r``."""
    coef = ad.dot(w_r, e)
    return ad.sub(e, ad.mul(ad.reshape(coef, coef.shape + (1,)), w_r))


def score_transH(e_h, e_r, w_r, e_t, norm="L2", strict=False) -> Tensor:
    _check_dims(e_h, e_r, w_r, e_t)
    if strict:
        n = np.linalg.norm(ad.as_tensor(w_r).data, axis=-1)
        if np.any(np.abs(n - 1.0) > 1e-6):
            raise ConstraintError(f"hyperplane normal is not unit length (norm {n.ravel()[0]:.6g})")
    h_perp = project_hyperplane(e_h, w_r)
    t_perp = project_hyperplane(e_t, w_r)
    return _norm(ad.sub(ad.add(h_perp, e_r), t_perp), norm)


def score_transR(e_h, e_r, M_r, e_t, norm="L2") -> Tensor:
    _check_dims(e_h, e_r, e_t)
    M_r = ad.as_tensor(M_r)
    if M_r.shape[-2:] != (ad.as_tensor(e_h).shape[-1],) * 2:
        raise DimensionError(f"projection matrix {M_r.shape} does not match dim {ad.as_tensor(e_h).shape[-1]}")
    return _norm(ad.sub(ad.add(ad.matvec(M_r, e_h), e_r), ad.matvec(M_r, e_t)), norm)


def score_distMult(e_h, r_diag, e_t) -> Tensor:
    _check_dims(e_h, r_diag, e_t)
    # h*t first: elementwise products commute bitwise, so swapping h and t is exact
    return ad.scale(ad.sum(ad.mul(ad.mul(e_h, e_t), r_diag), axis=-1), -1.0)


def required_rows(relations, spec: ModelSpec) -> dict:
    rel = np.unique(np.asarray(relations, dtype=np.int64))
    req = {"relation": rel}
    if spec.decoder is DecoderKind.TRANSH:
        req["hyperplane"] = rel
    elif spec.decoder is DecoderKind.TRANSR:
        req["proj"] = rel
    return req


def relation_params(view, relations, spec: ModelSpec):
    """Per-row decoder relation tensors for ``relations``."""
    e_r = view.rows("relation", relations)
    extra = None
    if spec.decoder is DecoderKind.TRANSH:
        extra = view.rows("hyperplane", relations)
    elif spec.decoder is DecoderKind.TRANSR:
        extra = view.rows("proj", relations)
    return e_r, extra


def score(spec: ModelSpec, e_h, e_r, extra, e_t) -> Tensor:
    kind = spec.decoder
    if kind is DecoderKind.TRANSE:
        return score_transE(e_h, e_r, e_t, spec.norm)
    if kind is DecoderKind.TRANSH:
        return score_transH(e_h, e_r, extra, e_t, spec.norm, strict=spec.strict)
    if kind is DecoderKind.TRANSR:
        return score_transR(e_h, e_r, extra, e_t, spec.norm)
    return score_distMult(e_h, e_r, e_t)
