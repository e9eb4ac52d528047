"""Shared builders for small random instances."""

from __future__ import annotations

import numpy as np

from mmvam.design import build_design
from mmvam.ingest import ObservationRecord, build_dataset
from mmvam.simgen import SimSpec, random_params, simulate_dataset

VARIANTS = ("gp.r", "rgp.r", "gp.g", "vp", "cp")


def small_instance(variant: str, seed: int, n: int = 12, T: int | None = None, m: int = 3, missing_rate: float = 0.25):
    """(dataset, design, random params) with n_obs well below the dense-oracle cap."""
    rng = np.random.default_rng(seed)
    if T is None:
        T = int(rng.integers(2, 4)) if variant == "vp" else int(rng.integers(1, 4))
    data, _ = simulate_dataset(SimSpec(n=n, T=T, m=m, variant=variant, missing_rate=missing_rate, seed=seed))
    design = build_design(data, variant)
    return data, design, random_params(design, rng)


def records_from_rows(rows):
    """rows of (student, year, teacher or None, score or None)."""
    return [ObservationRecord(s, y, t, sc) for s, y, t, sc in rows]


def one_way_balanced(m: int, k: int, seed: int):
    """T = 1 dataset with m teachers and k students per teacher."""
    rng = np.random.default_rng(seed)
    rows = []
    effects = rng.normal(0, 0.7, m)
    for j in range(m):
        for i in range(k):
            rows.append((f"s{j:03d}_{i:03d}", 1, f"t{j:03d}", float(2.0 + effects[j] + rng.normal())))
    return build_dataset(records_from_rows(rows), T=1)


def dense_posterior(design, params):
    """(eta~, v~) at ``params`` from explicit dense matrices."""
    from mmvam.design import assemble_G, assemble_R_inverse

    S = design.S(params.alpha if design.alpha_pairs else None).toarray()
    _, Ginv, _ = assemble_G(design, params.gammas, params.gamma_stu)
    if params.sigma2 is not None:
        _, Rinv, _ = assemble_R_inverse(design, sigma2=params.sigma2)
    else:
        _, Rinv, _ = assemble_R_inverse(design, sigma=params.sigma)
    Rinv = Rinv.toarray()
    v = np.linalg.inv(S.T @ Rinv @ S + Ginv.toarray())
    eta = v @ S.T @ Rinv @ (design.data.y - design.X @ params.beta)
    return eta, v


def dense_q(design, new, posterior):
    """E[log p(y, eta; new) | y] for a fixed posterior (eta~, v~), constants dropped."""
    from mmvam.design import assemble_G, assemble_R_inverse

    eta, v = posterior
    S = design.S(new.alpha if design.alpha_pairs else None).toarray()
    G, _, ldG = assemble_G(design, new.gammas, new.gamma_stu)
    if new.sigma2 is not None:
        R, _, ldR = assemble_R_inverse(design, sigma2=new.sigma2)
    else:
        R, _, ldR = assemble_R_inverse(design, sigma=new.sigma)
    res = design.data.y - design.X @ new.beta - S @ eta
    Eee = np.outer(res, res) + S @ v @ S.T
    Eeta = v + np.outer(eta, eta)
    return -0.5 * (ldR + np.trace(np.linalg.solve(R.toarray(), Eee))) - 0.5 * (
        ldG + np.trace(np.linalg.solve(G.toarray(), Eeta))
    )


def dense_q_gradient(design, new, posterior, step=1e-5):
    """Central-difference gradient of :func:`dense_q` over the free parameters."""
    from mmvam.emcore import ParamLayout

    layout = ParamLayout(design)
    x0 = layout.pack(new)
    out = np.empty(len(x0))
    for j in range(len(x0)):
        h = step * max(abs(x0[j]), 0.1)
        e = np.zeros_like(x0)
        e[j] = h
        out[j] = (dense_q(design, layout.unpack(x0 + e, new), posterior) - dense_q(design, layout.unpack(x0 - e, new), posterior)) / (2 * h)
    return out
