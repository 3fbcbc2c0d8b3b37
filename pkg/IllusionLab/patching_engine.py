from dataclasses import dataclass

import numpy as np

from IllusionLab.errors import DimensionMismatchError, KernelCheckError
from IllusionLab.numerics import (
    as_matrix,
    as_vector,
    decompose_against_kernel,
    require_orthonormal,
    require_same_dim,
    require_unit,
)
from IllusionLab.tolerances import Sites, Tolerances

FULL_REPLACE = "full_replace"
SUBSPACE_PATCH = "subspace_patch"
ZERO_SUBSPACE = "zero_subspace"
RANK1_EDIT = "rank1_edit"
KINDS = (FULL_REPLACE, SUBSPACE_PATCH, ZERO_SUBSPACE, RANK1_EDIT)


@dataclass(frozen=True)
class InterventionSpec:
    site: str
    kind: str
    value: np.ndarray = None
    basis: np.ndarray = None
    source_activation: np.ndarray = None
    v: np.ndarray = None
    unit_constrained: bool = False
    a: np.ndarray = None
    b: np.ndarray = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}, expected one of {KINDS}")
        if self.kind == SUBSPACE_PATCH:
            require_orthonormal(self.basis, "subspace_patch basis")
            require_same_dim(self.basis.T, self.source_activation, ("basis", "source_activation"))
        if self.kind == ZERO_SUBSPACE and self.unit_constrained:
            require_unit(self.v, "zero_subspace v")
        if self.kind == RANK1_EDIT and self.site != Sites.mlp_out:
            raise ValueError(f"rank1_edit rewrites W_out and must target {Sites.mlp_out!r}, got {self.site!r}")

    @property
    def dim(self):
        if self.kind == FULL_REPLACE:
            return self.value.shape[0]
        if self.kind == SUBSPACE_PATCH:
            return self.basis.shape[0]
        if self.kind == ZERO_SUBSPACE:
            return self.v.shape[0]
        return self.a.shape[0]


def full_replace(site, value):
    return InterventionSpec(site=site, kind=FULL_REPLACE, value=as_vector(value, "value"))


def subspace_patch(site, basis, source_activation):
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim == 1:
        basis = basis[:, None]
    return InterventionSpec(
        site=site,
        kind=SUBSPACE_PATCH,
        basis=as_matrix(basis, "basis", allow_empty_cols=True),
        source_activation=as_vector(source_activation, "source_activation"),
    )


def zero_subspace(site, v, unit_constrained=False):
    return InterventionSpec(site=site, kind=ZERO_SUBSPACE, v=as_vector(v, "v"), unit_constrained=unit_constrained)


def rank1_edit(a, b):
    return InterventionSpec(site=Sites.mlp_out, kind=RANK1_EDIT, a=as_vector(a, "a"), b=as_vector(b, "b"))


def patch_1d(act_base, act_source, v):
    """
    Overwrite the projection of act_base on v with that of act_source
    :param act_base: activation being patched
    :param act_source: activation supplying the value along v
    :param v: unit direction, never normalized here
    :return: act_base + (vᵀact_source - vᵀact_base)·v
    """
    act_base = as_vector(act_base, "act_base")
    act_source = as_vector(act_source, "act_source")
    v = as_vector(v, "v")
    require_same_dim(act_base, act_source, ("act_base", "act_source"))
    require_same_dim(act_base, v, ("act_base", "v"))
    require_unit(v)
    return act_base + (v @ act_source - v @ act_base) * v


def patch_kd(act_base, act_source, V):
    """(I - VVᵀ)·act_base + VVᵀ·act_source for a basis V with orthonormal columns."""
    act_base = as_vector(act_base, "act_base")
    act_source = as_vector(act_source, "act_source")
    V = as_matrix(V, "V", allow_empty_cols=True)
    require_same_dim(act_base, act_source, ("act_base", "act_source"))
    if V.shape[0] != act_base.shape[0]:
        raise DimensionMismatchError(f"V has {V.shape[0]} rows but activations have dimension {act_base.shape[0]}")
    require_orthonormal(V)
    return act_base + V @ (V.T @ (act_source - act_base))


def patch_rows(act_base, act_source, V):
    """Batched patch_kd over activation rows, without re-validating V."""
    return act_base + ((act_source - act_base) @ V) @ V.T


def zero_subspace_intervention(x, v):
    """x - (vᵀx)·v; v keeps its norm so the map is not a projector unless ‖v‖ = 1."""
    x = as_vector(x, "x")
    v = as_vector(v, "v")
    require_same_dim(x, v, ("x", "v"))
    return x - (v @ x) * v


def apply_rank1_edit(W, a, b):
    W = as_matrix(W, "W")
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape[0] != W.shape[0] or b.shape[0] != W.shape[1]:
        raise DimensionMismatchError(f"edit ({a.shape[0]}, {b.shape[0]}) does not fit W of shape {W.shape}")
    return W + np.outer(a, b)


def apply_intervention(act, spec):
    if spec.kind == FULL_REPLACE:
        return spec.value.copy()
    if spec.kind == SUBSPACE_PATCH:
        return act + spec.basis @ (spec.basis.T @ (spec.source_activation - act))
    if spec.kind == ZERO_SUBSPACE:
        return act - (spec.v @ act) * spec.v
    raise ValueError(f"{spec.kind} edits weights and has no activation form")


def illusory_contribution(act_base, act_source, v, W_out, v_disc=None):
    """
    Change in W_out·act caused by patching along v = (v_disc + v_dorm)/√2
    :param act_base: MLP hidden activation of the base run
    :param act_source: MLP hidden activation of the source run
    :param v: unit patch direction
    :param W_out: down-projection
    :param v_disc: the disconnected part; defaults to the normalized kernel component of v
    :return: W_out·(patched - base)
    """
    v = as_vector(v, "v")
    W_out = as_matrix(W_out, "W_out")
    require_unit(v)
    if v_disc is None:
        v_null, v_row = decompose_against_kernel(v, W_out)
        parts_ok = np.isclose(np.linalg.norm(v_null), 1 / np.sqrt(2), atol=Tolerances.kernel_check) and np.isclose(
            np.linalg.norm(v_row), 1 / np.sqrt(2), atol=Tolerances.kernel_check
        )
        if not parts_ok:
            raise KernelCheckError(
                f"v does not split into equal kernel and rowspace parts "
                f"(‖v_null‖ = {np.linalg.norm(v_null):.6f}, ‖v_row‖ = {np.linalg.norm(v_row):.6f})"
            )
        v_disc = v_null * np.sqrt(2)
    else:
        v_disc = as_vector(v_disc, "v_disc")
        require_unit(v_disc, "v_disc")
        leak = float(np.linalg.norm(W_out @ v_disc)) / max(float(np.linalg.norm(W_out)), 1.0)
        if leak > Tolerances.kernel_check:
            raise KernelCheckError(f"v_disc is not in ker W_out (relative ‖W_out v_disc‖ = {leak:.3e})")
        v_dorm = np.sqrt(2) * v - v_disc
        if abs(float(np.linalg.norm(v_dorm)) - 1.0) > Tolerances.kernel_check or abs(float(v_disc @ v_dorm)) > Tolerances.kernel_check:
            raise KernelCheckError("v - v_disc/√2 is not a unit direction orthogonal to v_disc")
    patched = patch_1d(act_base, act_source, v)
    return W_out @ (patched - as_vector(act_base, "act_base"))


def spec_to_dict(spec):
    data = {"site": spec.site, "kind": spec.kind}
    if spec.kind == FULL_REPLACE:
        data["value"] = spec.value.tolist()
    elif spec.kind == SUBSPACE_PATCH:
        data["basis"] = spec.basis.tolist()
        data["source_activation"] = spec.source_activation.tolist()
    elif spec.kind == ZERO_SUBSPACE:
        data["v"] = spec.v.tolist()
        data["unit_constrained"] = spec.unit_constrained
    else:
        data["a"] = spec.a.tolist()
        data["b"] = spec.b.tolist()
    return data


def spec_from_dict(data):
    kind = data["kind"]
    if kind == FULL_REPLACE:
        return full_replace(data["site"], data["value"])
    if kind == SUBSPACE_PATCH:
        basis = np.asarray(data["basis"], dtype=np.float64).reshape(len(data["source_activation"]), -1)
        return subspace_patch(data["site"], basis, data["source_activation"])
    if kind == ZERO_SUBSPACE:
        return zero_subspace(data["site"], data["v"], data.get("unit_constrained", False))
    if kind == RANK1_EDIT:
        return rank1_edit(data["a"], data["b"])
    raise ValueError(f"unknown intervention kind {kind!r}")
