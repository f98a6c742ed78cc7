"""Executable verification suite: every equivariance/invariance identity the
layers are supposed to satisfy, runnable on random torus-padded instances,
plus central finite-difference gradient checks for every layer type.

Each check draws ``trials`` random (group element, input) pairs, evaluates
both sides of its identity and reports the maximum absolute deviation against
a tolerance.  The substitution lemmas that support the equivariance proofs
are checked pointwise with a periodized affine-map evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import nn
from . import se as se_mod
from . import tensor as T
from .errors import UnknownTarget
from .groups import P4Element, act_group, act_planar
from .models import ModelConfig, build_model
from .nn import Ctx
from .tensor import Tensor, clear_graph, no_grad, seeded_rng


@dataclass
class CheckResult:
    target: str
    prop: str
    max_dev: float
    tol: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_dev < self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}  {self.target:<24} {self.prop:<38} "
                f"max dev {self.max_dev:.3e}  tol {self.tol:.0e}  ({self.trials} trials)")


def _rand_g(rng, rotations: bool = True, span: int = 3) -> P4Element:
    r = int(rng.integers(4)) if rotations else 0
    return P4Element(r, (int(rng.integers(-span, span + 1)),
                         int(rng.integers(-span, span + 1))))


def equivariance_gap(apply_fn, act_in, act_out, make_input, trials: int, rng,
                     rotations: bool = True) -> float:
    """max | apply(act(g, x)) - act(g, apply(x)) | over random (g, x) draws."""
    worst = 0.0
    for _ in range(trials):
        x = make_input(rng)
        g = _rand_g(rng, rotations)
        with no_grad():
            lhs = apply_fn(Tensor(act_in(g, x))).data
            rhs = act_out(g, apply_fn(Tensor(x)).data)
        clear_graph()
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def invariance_gap(apply_fn, act_in, make_input, trials: int, rng,
                   rotations: bool = True) -> float:
    worst = 0.0
    for _ in range(trials):
        x = make_input(rng)
        g = _rand_g(rng, rotations)
        with no_grad():
            lhs = apply_fn(Tensor(act_in(g, x))).data
            rhs = apply_fn(Tensor(x)).data
        clear_graph()
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


# -- periodized affine-map evaluators (for the proof lemmas) ------------------------


def affine_eval_z2(f, psi, beta, centre, point, H, W):
    """A_(x)[f](y) on the H x W torus; psi/beta have k x k support around 0."""
    k = psi.shape[-1]
    m = k // 2
    du = (point[0] - centre[0] + m) % H
    dv = (point[1] - centre[1] + m) % W
    fv = f[point[0] % H, point[1] % W]
    if 0 <= du < k and 0 <= dv < k:
        return fv * psi[du, dv] + beta[du, dv]
    return 0.0


def affine_eval_p4(f, psi, beta, P: int, centre_px, R: int, point_px, H, W):
    """A_(P,x)[f](R,y) on the p4 torus; psi [4,k,k], beta [k,k] (quotient).

    Centre and evaluation point are pixels (row, col); the displacement is
    rotated by P^-1 (the linear part of the pixel rotation) to index psi/beta.
    """
    k = psi.shape[-1]
    m = k // 2
    a = point_px[0] - centre_px[0]
    b = point_px[1] - centre_px[1]
    for _ in range((-P) % 4):
        a, b = b, -a
    du = (a + m) % H
    dv = (b + m) % W
    fv = f[R % 4, point_px[0] % H, point_px[1] % W]
    if 0 <= du < k and 0 <= dv < k:
        return fv * psi[(R - P) % 4, du, dv] + beta[du, dv]
    return 0.0


def lemma_z2_gap(trials: int, rng) -> tuple[float, float]:
    """Substitution identities behind the planar ASC equivariance proof."""
    H = W = 6
    k = 3
    worst1 = worst2 = 0.0
    for _ in range(trials):
        f = rng.standard_normal((H, W)).astype(np.float32)
        psi = rng.standard_normal((k, k)).astype(np.float32)
        beta = rng.standard_normal((k, k)).astype(np.float32)
        z = (int(rng.integers(-4, 5)), int(rng.integers(-4, 5)))
        x = (int(rng.integers(H)), int(rng.integers(W)))
        y = (x[0] + int(rng.integers(-1, 2)), x[1] + int(rng.integers(-1, 2)))
        fz = act_planar(P4Element(0, (z[1], z[0])), f)  # t = (tx, ty) = (col, row)
        # A_x[L_z f](y + z) == A_(x - z)[f](y)
        lhs = affine_eval_z2(fz, psi, beta, x, (y[0] + z[0], y[1] + z[1]), H, W)
        rhs = affine_eval_z2(f, psi, beta, (x[0] - z[0], x[1] - z[1]), y, H, W)
        worst1 = max(worst1, abs(lhs - rhs))
        # A_x[L_z f](x) == A_(x - z)[f](x - z)
        lhs2 = affine_eval_z2(fz, psi, beta, x, x, H, W)
        rhs2 = affine_eval_z2(f, psi, beta, (x[0] - z[0], x[1] - z[1]),
                              (x[0] - z[0], x[1] - z[1]), H, W)
        worst2 = max(worst2, abs(lhs2 - rhs2))
    return worst1, worst2


def pixel_map(g: P4Element, p: tuple[int, int], H: int, W: int) -> tuple[int, int]:
    """Pixel realization of a group element: rotate about the array centre,
    then translate (row shift ty, column shift tx); the realization of
    ``act_*``, so points move exactly the way the arrays do."""
    row, col = p
    for _ in range(g.r % 4):
        row, col = col, H - 1 - row
    return (row + g.t[1]) % H, (col + g.t[0]) % W


def lemma_p4_gap(trials: int, rng) -> tuple[float, float]:
    """Substitution identities behind the p4 ASC equivariance proof.

    All spatial points are realized as pixels through ``pixel_map`` (the same
    realization the array actions use); orientation indices stay exact.
    """
    H = W = 6
    k = 3
    worst1 = worst2 = 0.0
    for _ in range(trials):
        f = rng.standard_normal((4, H, W)).astype(np.float32)
        psi = rng.standard_normal((4, k, k)).astype(np.float32)
        beta = rng.standard_normal((k, k)).astype(np.float32)
        gs = _rand_g(rng)                      # (S, z)
        S = gs.r
        fz = act_group(gs, f)
        R = int(rng.integers(4))
        P = int(rng.integers(4))
        x_p = (int(rng.integers(H)), int(rng.integers(W)))          # centre pixel
        x_t = pixel_map(gs.inverse(), x_p, H, W)                    # S^-1 (x - z)
        # proof lemma 1: A_(P,x)[L_(S,z)f](SR, x) == A_{(S,z)^-1(P,x)}[f](R, S^-1(x-z))
        lhs = affine_eval_p4(fz, psi, beta, P, x_p, (S + R) % 4, x_p, H, W)
        rhs = affine_eval_p4(f, psi, beta, (P - S) % 4, x_t, R, x_t, H, W)
        worst1 = max(worst1, abs(lhs - rhs))
        # proof lemma 2: with y -> S y + z as well, neighbours map the same way
        y_p = (int(rng.integers(H)), int(rng.integers(W)))
        y_img = pixel_map(gs, y_p, H, W)                            # S y + z
        lhs2 = affine_eval_p4(fz, psi, beta, P, x_p, (S + R) % 4, y_img, H, W)
        rhs2 = affine_eval_p4(f, psi, beta, (P - S) % 4, x_t, R, y_p, H, W)
        worst2 = max(worst2, abs(lhs2 - rhs2))
    return worst1, worst2


def beta_collapse_gap(trials: int, rng) -> float:
    """Evaluating with an orientation-constant beta on G, added per (R, y) and
    summed over R, equals the layer's quotient beta scaled by |H| = 4."""
    H = W = 4
    k = 3
    worst = 0.0
    for _ in range(trials):
        C = 2
        f = rng.standard_normal((1, C, 4, H, W)).astype(np.float32)
        psi = rng.standard_normal((C, 4, k, k)).astype(np.float32)
        b = rng.standard_normal((C, k, k)).astype(np.float32)
        with no_grad():
            via_layer = A.p4_simple_asc(Tensor(f), A.AffineParams(Tensor(psi), Tensor(4.0 * b)),
                                        k, padding="circular", heads=C).data
            via_g_beta = _p4_simple_asc_g_beta(f, psi, b, k)
        clear_graph()
        worst = max(worst, float(np.abs(via_layer - via_g_beta).max()))
    return worst


def _p4_simple_asc_g_beta(f, psi, beta_g, k):
    """Composed reference route through the public ops: gather, per-(R,y)
    affine map with beta defined on G (constant over orientations), orientation
    sums, score, aggregation."""
    B, C, _, H, W = f.shape
    win = A.neighborhood_gather(Tensor(f), k, padding="circular")
    outs = []
    centre = (k * k - 1) // 2
    for P in range(4):
        ap = A.AffineParams(Tensor(psi), Tensor(beta_g))
        aw = A.p4_affine_map_apply(win, ap, P, role="neighbor")   # beta added per (R, y)
        agg = T.reduce_sum(aw, 2)                                  # [B,C,H,W,k2]
        ac = T._make(np.ascontiguousarray(aw.data[..., centre]))   # centre column [B,C,4,H,W]
        alpha = A.p4_score(ac, T._make(aw.data), heads=C)
        alpha_e = T.reshape(alpha, (B, C, 1, H, W, k * k))
        agg_e = T.reshape(agg, (B, C, 1, H, W, k * k))
        outs.append(T.reduce_sum(T.mul(alpha_e, agg_e), 5).data[:, :, 0])
    return np.stack(outs, axis=2)


# -- check registry -----------------------------------------------------------------


def _mk_planar(shape):
    def make(rng):
        return rng.standard_normal(shape).astype(np.float32)
    return make


def _conv_check(trials, tol, rng):
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    gap = equivariance_gap(
        lambda t: nn.conv2d(t, w, padding="circular"),
        act_planar, act_planar, _mk_planar((2, 3, 8, 8)), trials, rng,
        rotations=False)
    return [CheckResult("conv2d", "translation equivariance (torus)", gap, tol, trials)]


def _lifting_check(trials, tol, rng):
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    gap = equivariance_gap(
        lambda t: nn.lifting_conv(t, w, padding="circular"),
        act_planar, act_group, _mk_planar((2, 3, 8, 8)), trials, rng)
    return [CheckResult("lifting_conv", "p4 equivariance (torus)", gap, tol, trials)]


def _group_conv_check(trials, tol, rng):
    w = Tensor(rng.standard_normal((3, 2, 4, 3, 3)).astype(np.float32))
    gap = equivariance_gap(
        lambda t: nn.group_conv(t, w, padding="circular"),
        act_group, act_group, _mk_planar((1, 2, 4, 6, 6)), trials, rng)
    return [CheckResult("group_conv", "p4 equivariance (torus)", gap, tol, trials)]


def _pointwise_check(trials, tol, rng):
    w = Tensor(rng.standard_normal((5, 2)).astype(np.float32))
    gap = equivariance_gap(
        lambda t: nn.pointwise(t, w),
        act_group, act_group, _mk_planar((1, 2, 4, 6, 6)), trials, rng)
    return [CheckResult("pointwise", "commutes with act_group", gap, tol, trials)]


def _batchnorm_check(trials, tol, rng):
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(3).astype(np.float32))
    beta = Tensor(0.1 * rng.standard_normal(3).astype(np.float32))

    def apply_fn(t):
        rm = np.zeros(3)
        rv = np.ones(3)
        return nn.batchnorm(t, gamma, beta, rm, rv, train=True)

    gap = equivariance_gap(apply_fn, act_group, act_group,
                           _mk_planar((3, 3, 4, 6, 6)), trials, rng)
    return [CheckResult("batchnorm", "p4 equivariance (orientation-pooled stats)",
                        gap, tol, trials)]


def _simple_asc_check(trials, tol, rng):
    results = []
    psi = Tensor(rng.standard_normal((1, 3, 3)).astype(np.float32))
    beta = Tensor(rng.standard_normal((1, 3, 3)).astype(np.float32))
    gap = equivariance_gap(
        lambda t: A.simple_asc(t, A.AffineParams(psi, beta), 3, padding="circular"),
        act_planar, act_planar, _mk_planar((1, 1, 6, 6)), trials, rng,
        rotations=False)
    results.append(CheckResult("simple_asc", "translation equivariance (torus)",
                               gap, tol, trials))
    return results


def _asc_check(trials, tol, rng):
    d = 4
    p = A.AscParams(
        Tensor(rng.standard_normal((d, 3)).astype(np.float32)),
        Tensor(rng.standard_normal((d, 3)).astype(np.float32)),
        Tensor(rng.standard_normal((d, 3)).astype(np.float32)),
        A.AffineParams(Tensor(rng.standard_normal(d).astype(np.float32)),
                       Tensor(rng.standard_normal(d).astype(np.float32))),
        A.AffineParams(Tensor(rng.standard_normal((d, 3, 3)).astype(np.float32)),
                       Tensor(rng.standard_normal((d, 3, 3)).astype(np.float32))),
        A.AffineParams(Tensor(rng.standard_normal((d, 3, 3)).astype(np.float32)),
                       Tensor(rng.standard_normal((d, 3, 3)).astype(np.float32))),
        heads=2, d_k=d)
    gap = equivariance_gap(
        lambda t: A.asc_forward(t, p, 3, padding="circular"),
        act_planar, act_planar, _mk_planar((1, 3, 6, 6)), trials, rng,
        rotations=False)
    return [CheckResult("asc", "translation equivariance (torus)", gap, tol, trials)]


def _sasa_check(trials, tol, rng):
    d, heads = 4, 2
    wq = Tensor(rng.standard_normal((d, 3)).astype(np.float32))
    wk = Tensor(rng.standard_normal((d, 3)).astype(np.float32))
    wv = Tensor(rng.standard_normal((d, 3)).astype(np.float32))
    br = Tensor(rng.standard_normal((heads, 1, 3)).astype(np.float32))
    bc = Tensor(rng.standard_normal((heads, 1, 3)).astype(np.float32))
    gap = equivariance_gap(
        lambda t: A.sasa_self_attention(t, wq, wk, wv, br, bc, heads, 3,
                                        padding="circular"),
        act_planar, act_planar, _mk_planar((1, 3, 6, 6)), trials, rng,
        rotations=False)
    return [CheckResult("sasa", "translation equivariance (torus)", gap, tol, trials)]


def _p4_simple_asc_check(trials, tol, rng):
    C = 2
    psi = Tensor(rng.standard_normal((C, 4, 3, 3)).astype(np.float32))
    beta = Tensor(rng.standard_normal((C, 3, 3)).astype(np.float32))
    gap = equivariance_gap(
        lambda t: A.p4_simple_asc(t, A.AffineParams(psi, beta), 3,
                                  padding="circular", heads=C),
        act_group, act_group, _mk_planar((1, C, 4, 6, 6)), trials, rng)
    return [CheckResult("p4_simple_asc", "p4 equivariance (torus)", gap, tol, trials)]


def _p4_asc_check(trials, tol, rng):
    d = 4
    p = A.AscParams(
        Tensor(rng.standard_normal((d, 2, 4)).astype(np.float32) * 0.5),
        Tensor(rng.standard_normal((d, 2, 4)).astype(np.float32) * 0.5),
        Tensor(rng.standard_normal((d, 2, 4)).astype(np.float32) * 0.5),
        A.AffineParams(Tensor(rng.standard_normal((d, 4)).astype(np.float32)),
                       Tensor(rng.standard_normal(d).astype(np.float32))),
        A.AffineParams(Tensor(rng.standard_normal((d, 4, 3, 3)).astype(np.float32)),
                       Tensor(rng.standard_normal((d, 3, 3)).astype(np.float32))),
        A.AffineParams(Tensor(rng.standard_normal((d, 4, 3, 3)).astype(np.float32)),
                       Tensor(rng.standard_normal((d, 3, 3)).astype(np.float32))),
        heads=2, d_k=d)
    gap = equivariance_gap(
        lambda t: A.p4_asc_forward(t, p, 3, padding="circular"),
        act_group, act_group, _mk_planar((1, 2, 4, 6, 6)), trials, rng)
    return [CheckResult("p4_asc", "p4 equivariance (torus)", gap, tol, trials)]


def _se_check(trials, tol, rng):
    C = 4
    w1 = Tensor(rng.standard_normal((C, 2)).astype(np.float32))
    w2 = Tensor(rng.standard_normal((2, C)).astype(np.float32))
    res = []
    gap = invariance_gap(
        lambda t: se_mod.squeeze(t, w1, w2),
        act_group, _mk_planar((2, C, 4, 6, 6)), trials, rng)
    res.append(CheckResult("se", "squeeze invariance (p4 torus)", gap, min(tol, 1e-6), trials))
    gap2 = invariance_gap(
        lambda t: se_mod.squeeze(t, w1, w2),
        act_planar, _mk_planar((2, C, 6, 6)), trials, rng, rotations=False)
    res.append(CheckResult("se", "squeeze invariance (planar torus)", gap2,
                           min(tol, 1e-6), trials))
    gap3 = equivariance_gap(
        lambda t: se_mod.excite(t, se_mod.squeeze(t, w1, w2)),
        act_group, act_group, _mk_planar((2, C, 4, 6, 6)), trials, rng)
    res.append(CheckResult("se", "squeeze-excite equivariance", gap3,
                           min(tol, 1e-6), trials))
    return res


def _head_check(trials, tol, rng):
    C, classes = 4, 10
    w = Tensor(rng.standard_normal((classes, C)).astype(np.float32))
    b = Tensor(rng.standard_normal(classes).astype(np.float32))
    gap = invariance_gap(
        lambda t: nn.global_pool_and_linear(t, w, b),
        act_group, _mk_planar((2, C, 4, 6, 6)), trials, rng)
    return [CheckResult("head", "logit invariance under act_group", gap, tol, trials)]


def _lemma_z2_check(trials, tol, rng):
    w1, w2 = lemma_z2_gap(trials, rng)
    t = min(tol, 1e-6)
    return [CheckResult("lemma_z2", "affine map shift substitution (proof 1)", w1, t, trials),
            CheckResult("lemma_z2", "affine map centre substitution (proof 2)", w2, t, trials)]


def _lemma_p4_check(trials, tol, rng):
    w1, w2 = lemma_p4_gap(trials, rng)
    t = min(tol, 1e-6)
    return [CheckResult("lemma_p4", "p4 affine map substitution (proof 1)", w1, t, trials),
            CheckResult("lemma_p4", "p4 affine map substitution (proof 2)", w2, t, trials)]


def _beta_collapse_check(trials, tol, rng):
    gap = beta_collapse_gap(max(trials // 5, 3), rng)
    return [CheckResult("beta_collapse", "beta on G == 4x beta on G/H", gap, tol,
                        max(trials // 5, 3))]


def _model_rotation_check(trials, tol, rng):
    cfg = ModelConfig("p4resnet29_asc", num_classes=10, seed=int(rng.integers(2 ** 31)))
    model = build_model(cfg)
    # wake the residual branches up: zero-init gammas would bypass attention
    for name, p in model.named_parameters():
        if name.endswith("bn3.gamma"):
            p.data[...] = 1.0 + 0.1 * rng.standard_normal(p.shape).astype(np.float32)
    ctx = Ctx(train=False, pad="circular")
    worst = 0.0
    n = max(trials, 2)
    for _ in range(n):
        x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
        with no_grad():
            base = model(Tensor(x), ctx).data
            rot = model(Tensor(act_planar(P4Element(1), x)), ctx).data
        clear_graph()
        worst = max(worst, float(np.abs(base - rot).max()))
    return [CheckResult("model_p4_rotation", "p4resnet29_asc logits, 90deg input",
                        worst, tol, n)]


EQUIVARIANCE_CHECKS = {
    "conv2d": (_conv_check, 100, 1e-5),
    "lifting_conv": (_lifting_check, 100, 1e-5),
    "group_conv": (_group_conv_check, 100, 1e-5),
    "pointwise": (_pointwise_check, 50, 1e-5),
    "batchnorm": (_batchnorm_check, 50, 1e-5),
    "simple_asc": (_simple_asc_check, 100, 1e-5),
    "asc": (_asc_check, 100, 1e-5),
    "sasa": (_sasa_check, 100, 1e-5),
    "p4_simple_asc": (_p4_simple_asc_check, 50, 1e-5),
    "p4_asc": (_p4_asc_check, 50, 1e-5),
    "se": (_se_check, 100, 1e-6),
    "head": (_head_check, 50, 1e-5),
    "lemma_z2": (_lemma_z2_check, 100, 1e-6),
    "lemma_p4": (_lemma_p4_check, 100, 1e-6),
    "beta_collapse": (_beta_collapse_check, 20, 1e-5),
    "model_p4_rotation": (_model_rotation_check, 3, 1e-4),
}


def check_equivariance(target: str, trials: int | None = None,
                       tol: float | None = None, seed: int = 0) -> list[CheckResult]:
    """Run one registered property check (or 'all'); returns per-property results."""
    if target == "all":
        results = []
        for name in EQUIVARIANCE_CHECKS:
            results.extend(check_equivariance(name, trials, tol, seed))
        return results
    if target not in EQUIVARIANCE_CHECKS:
        raise UnknownTarget(
            f"unknown target {target!r}; known: {', '.join(EQUIVARIANCE_CHECKS)}, all")
    fn, default_trials, default_tol = EQUIVARIANCE_CHECKS[target]
    rng = seeded_rng(seed)
    return fn(trials or default_trials, tol if tol is not None else default_tol, rng)


# -- gradient checks ---------------------------------------------------------------


def fd_gradcheck(make_loss, params, eps: float = 1e-3, probes: int = 25,
                 seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    The error is measured relative to the largest gradient magnitude of each
    parameter (vector-level relative error).  Each probe is evaluated at two
    step sizes; probes where the two estimates disagree sit on a ReLU kink
    (the difference quotient itself is invalid there) and are skipped.  A
    wrong backward rule still fails: there the two estimates agree with each
    other but not with the analytic gradient.
    """

    def fd(flat, i, step):
        old = flat[i]
        flat[i] = old + step
        clear_graph()
        lp = make_loss().item()
        flat[i] = old - step
        clear_graph()
        lm = make_loss().item()
        flat[i] = old
        return (lp - lm) / (2 * step)

    clear_graph()
    for p in params:
        p.zero_grad()
    make_loss().backward()
    grads = [None if p.grad is None else p.grad.copy() for p in params]
    clear_graph()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros(p.shape, np.float32)
        flat = p.data.reshape(-1)
        idxs = (range(flat.size) if flat.size <= probes
                else rng.choice(flat.size, probes, replace=False))
        num = {}
        for i in idxs:
            n1 = fd(flat, i, eps)
            n2 = fd(flat, i, eps / 2)
            consistency = max(abs(n1), abs(n2), 1.0) * 0.02
            if abs(n1 - n2) > consistency:
                continue  # kink-contaminated probe
            num[i] = n1
        gf = g.reshape(-1)
        scale = max(float(np.abs(gf).max()),
                    max((abs(v) for v in num.values()), default=0.0), 1e-6)
        err = max((abs(gf[i] - v) for i, v in num.items()), default=0.0) / scale
        worst = max(worst, err)
    clear_graph()
    return worst


def _grad_targets(rng):
    """Small instances of every layer type, as (make_loss, params) factories."""
    mk = {}

    def reg(name, factory):
        mk[name] = factory

    def t(shape, scale=1.0):
        return Tensor(rng.standard_normal(shape).astype(np.float32) * scale,
                      requires_grad=True)

    def w(shape, scale=1.0):
        return Tensor(rng.standard_normal(shape).astype(np.float32) * scale)

    def reg_simple():
        x = t((2, 3, 4))
        y = t((3, 4))
        wgt = w((2, 3, 4))

        def loss():
            z = T.mul(T.add(x, y), T.sigmoid(x))
            z = T.sub(z, T.relu(y))
            return T.reduce_sum(T.mul(z, wgt))
        return loss, [x, y]
    reg("elementwise", reg_simple)

    def reg_matmul():
        a = t((3, 4))
        b = t((4, 5))
        wgt = w((3, 5))
        return (lambda: T.reduce_sum(T.mul(T.matmul(a, b), wgt))), [a, b]
    reg("matmul", reg_matmul)

    def reg_softmax():
        x = t((3, 7))
        wgt = w((3, 7))
        return (lambda: T.reduce_sum(T.mul(T.softmax(x, 1), wgt))), [x]
    reg("softmax", reg_softmax)

    def reg_reduce():
        x = t((3, 4, 5))
        wgt = w((3, 5))
        def loss():
            s = T.reduce_mean(x, 1)
            m = T.reduce_max(x, 1)
            return T.reduce_sum(T.mul(T.add(s, m), wgt))
        return loss, [x]
    reg("reduce", reg_reduce)

    def reg_conv():
        x = t((2, 2, 6, 6))
        wc = t((3, 2, 3, 3), 0.4)
        wgt = w((2, 3, 3, 3))
        return (lambda: T.reduce_sum(T.mul(nn.conv2d(x, wc, stride=2), wgt))), [x, wc]
    reg("conv2d", reg_conv)

    def reg_lift():
        x = t((2, 2, 6, 6))
        wc = t((3, 2, 3, 3), 0.4)
        wgt = w((2, 3, 4, 6, 6))
        return (lambda: T.reduce_sum(T.mul(nn.lifting_conv(x, wc, padding="circular"), wgt))), [x, wc]
    reg("lifting_conv", reg_lift)

    def reg_gconv():
        x = t((1, 2, 4, 6, 6))
        wc = t((3, 2, 4, 3, 3), 0.3)
        wgt = w((1, 3, 4, 6, 6))
        return (lambda: T.reduce_sum(T.mul(nn.group_conv(x, wc), wgt))), [x, wc]
    reg("group_conv", reg_gconv)

    def reg_pw():
        x = t((1, 3, 4, 5, 5))
        wc = t((4, 3), 0.5)
        wgt = w((1, 4, 4, 5, 5))
        return (lambda: T.reduce_sum(T.mul(nn.pointwise(x, wc), wgt))), [x, wc]
    reg("pointwise", reg_pw)

    def reg_bn():
        x = t((3, 2, 5, 5))
        gamma = t((2,))
        beta = t((2,))
        wgt = w((3, 2, 5, 5))

        def loss():
            rm = np.zeros(2)
            rv = np.ones(2)
            return T.reduce_sum(T.mul(nn.batchnorm(x, gamma, beta, rm, rv, train=True), wgt))
        return loss, [x, gamma, beta]
    reg("batchnorm", reg_bn)

    def reg_pool():
        x = t((2, 3, 6, 6))
        wgt = w((2, 3, 3, 3))
        return (lambda: T.reduce_sum(T.mul(nn.avgpool2(x), wgt))), [x]
    reg("avgpool2", reg_pool)

    def reg_head():
        x = t((2, 4, 2, 2))
        wc = t((10, 4), 0.5)
        b = t((10,))
        wgt = w((2, 10))
        return (lambda: T.reduce_sum(T.mul(nn.global_pool_and_linear(x, wc, b), wgt))), [x, wc, b]
    reg("head", reg_head)

    def reg_gather():
        x = t((1, 2, 5, 5))
        wgt = w((1, 2, 5, 5, 9))
        return (lambda: T.reduce_sum(T.mul(A.neighborhood_gather(x, 3, "circular"), wgt))), [x]
    reg("gather", reg_gather)

    def reg_ssa():
        x = t((2, 1, 5, 5))
        wgt = w((2, 1, 5, 5))
        return (lambda: T.reduce_sum(T.mul(A.simple_self_attention(x, 3), wgt))), [x]
    reg("simple_self_attention", reg_ssa)

    def reg_sasa():
        x = t((2, 3, 5, 5))
        wq, wk, wv = t((4, 3), 0.5), t((4, 3), 0.5), t((4, 3), 0.5)
        br, bc = t((2, 1, 3)), t((2, 1, 3))
        wgt = w((2, 4, 5, 5))
        return (lambda: T.reduce_sum(T.mul(
            A.sasa_self_attention(x, wq, wk, wv, br, bc, 2, 3), wgt))), [x, wq, wk, wv, br, bc]
    reg("sasa", reg_sasa)

    def reg_sasc():
        x = t((2, 2, 5, 5))
        psi, beta = t((2, 3, 3)), t((2, 3, 3))
        wgt = w((2, 2, 5, 5))
        return (lambda: T.reduce_sum(T.mul(
            A.simple_asc(x, A.AffineParams(psi, beta), 3, heads=2), wgt))), [x, psi, beta]
    reg("simple_asc", reg_sasc)

    def reg_asc():
        x = t((2, 3, 5, 5))
        d = 4
        wq, wk, wv = t((d, 3), 0.5), t((d, 3), 0.5), t((d, 3), 0.5)
        pq, bq = t((d,)), t((d,))
        pk, bk = t((d, 3, 3)), t((d, 3, 3))
        pv, bv = t((d, 3, 3)), t((d, 3, 3))
        wgt = w((2, d, 5, 5))

        def loss():
            p = A.AscParams(wq, wk, wv, A.AffineParams(pq, bq),
                            A.AffineParams(pk, bk), A.AffineParams(pv, bv), 2, d)
            return T.reduce_sum(T.mul(A.asc_forward(x, p, 3), wgt))
        return loss, [x, wq, wk, wv, pq, bq, pk, bk, pv, bv]
    reg("asc", reg_asc)

    def reg_p4sasc():
        x = t((1, 2, 4, 4, 4))
        psi, beta = t((2, 4, 3, 3)), t((2, 3, 3))
        wgt = w((1, 2, 4, 4, 4))
        return (lambda: T.reduce_sum(T.mul(
            A.p4_simple_asc(x, A.AffineParams(psi, beta), 3, heads=2), wgt))), [x, psi, beta]
    reg("p4_simple_asc", reg_p4sasc)

    def reg_p4asc():
        x = t((1, 2, 4, 4, 4))
        d = 4
        wq, wk, wv = t((d, 2, 4), 0.4), t((d, 2, 4), 0.4), t((d, 2, 4), 0.4)
        pq, bq = t((d, 4)), t((d,))
        pk, bk = t((d, 4, 3, 3)), t((d, 3, 3))
        pv, bv = t((d, 4, 3, 3)), t((d, 3, 3))
        wgt = w((1, d, 4, 4, 4))

        def loss():
            p = A.AscParams(wq, wk, wv, A.AffineParams(pq, bq),
                            A.AffineParams(pk, bk), A.AffineParams(pv, bv), 2, d)
            return T.reduce_sum(T.mul(A.p4_asc_forward(x, p, 3), wgt))
        return loss, [x, wq, wk, wv, pq, bq, pk, bk, pv, bv]
    reg("p4_asc", reg_p4asc)

    def reg_se():
        x = t((2, 4, 5, 5))
        w1, w2 = t((4, 2), 0.6), t((2, 4), 0.6)
        wgt = w((2, 4, 5, 5))
        return (lambda: T.reduce_sum(T.mul(
            se_mod.excite(x, se_mod.squeeze(x, w1, w2)), wgt))), [x, w1, w2]
    reg("se", reg_se)

    def reg_ce():
        x = t((4, 6))
        labels = rng.integers(0, 6, size=4)
        return (lambda: T.cross_entropy(x, labels)), [x]
    reg("cross_entropy", reg_ce)

    def reg_block():
        from .models import Bottleneck
        block = Bottleneck(rng, 8, 8, p4=False, mid_kind="asc",
                           downsample=False, se_reduction=2)
        for name, p in block.named_parameters():
            if name.endswith("bn3.gamma"):
                p.data[...] = 1.0
        x = t((2, 8, 4, 4))
        wgt = w((2, 32, 4, 4), 0.5)
        ctx = Ctx(train=True)
        params = [x] + [p for _, p in block.named_parameters()]
        return (lambda: T.reduce_sum(T.mul(block(x, ctx), wgt))), params
    reg("bottleneck", reg_block)

    return mk


def gradcheck(target: str, seed: int = 0, tol: float = 1e-3) -> list[CheckResult]:
    """Finite-difference check for one layer type (or 'all')."""
    rng = seeded_rng(seed)
    factories = _grad_targets(rng)
    if target == "all":
        out = []
        for name in factories:
            out.extend(gradcheck(name, seed, tol))
        return out
    if target not in factories:
        raise UnknownTarget(
            f"unknown target {target!r}; known: {', '.join(factories)}, all")
    make_loss, params = factories[target]()
    err = fd_gradcheck(make_loss, params, seed=seed)
    return [CheckResult(target, "finite-difference gradient", err, tol, 1)]
