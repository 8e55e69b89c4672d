"""Self-contained verification suites: brute-force oracles and gradient checks.

Both suites are callable from the CLI and from tests.  They return structured
reports instead of printing, and raise nothing on failure - callers inspect
the ``ok`` flags so a harness can render every result before deciding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone, embedding, geometry, heads, pcsm, pipeline, shapes
from .autodiff import Tensor
from .config import RunConfig, preset
from .masking import csem_mask


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------

def _fps_oracle(pts: np.ndarray, count: int, start: int) -> np.ndarray:
    """Greedy farthest point sampling, written as bare loops."""
    n = pts.shape[0]
    picked = [start]
    best = np.full(n, np.inf)
    for _ in range(count - 1):
        last = pts[picked[-1]]
        for i in range(n):
            d = float(((pts[i] - last) ** 2).sum())
            if d < best[i]:
                best[i] = d
        winner = 0
        for i in range(1, n):
            if best[i] > best[winner]:
                winner = i
        picked.append(winner)
    return np.array(picked[:count], dtype=np.int64)


def _knn_oracle(pts: np.ndarray, center: int, k: int) -> np.ndarray:
    scored = sorted(range(pts.shape[0]),
                    key=lambda i: (float(((pts[i] - pts[center]) ** 2).sum()), i))
    return np.array(scored[:k], dtype=np.int64)


def _chamfer_oracle(a: np.ndarray, b: np.ndarray) -> float:
    def one_way(src, dst):
        total = 0.0
        for p in src:
            best = min(float(((p - q) ** 2).sum()) for q in dst)
            total += best
        return total / src.shape[0]

    return one_way(a, b) + one_way(b, a)


@dataclass
class OracleReport:
    op: str
    instances: int
    mismatches: int
    max_deviation: float

    @property
    def ok(self) -> bool:
        return self.mismatches == 0


def oracle_suite(instances: int = 200, seed: int = 0) -> list[OracleReport]:
    """Compare fps/knn/chamfer against independent brute-force versions.

    Index-valued results must agree exactly; chamfer within 1e-12.
    """
    rng = np.random.default_rng(seed)
    reports = []

    mism = 0
    for _ in range(instances):
        n = int(rng.integers(4, 65))
        pts = rng.normal(size=(n, 3))
        count = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        if not np.array_equal(geometry.fps(pts, count, start),
                              _fps_oracle(pts, count, start)):
            mism += 1
    reports.append(OracleReport("fps", instances, mism, 0.0))

    mism = 0
    for _ in range(instances):
        n = int(rng.integers(2, 65))
        pts = rng.normal(size=(n, 3))
        k = int(rng.integers(1, n + 1))
        center = int(rng.integers(n))
        got = geometry.knn(pts, np.array([center]), k)[0].member_indices
        if not np.array_equal(got, _knn_oracle(pts, center, k)):
            mism += 1
    reports.append(OracleReport("knn", instances, mism, 0.0))

    mism = 0
    worst = 0.0
    for _ in range(instances):
        na, nb = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        a = rng.normal(size=(na, 3))
        b = rng.normal(size=(nb, 3))
        dev = abs(geometry.chamfer(a, b) - _chamfer_oracle(a, b))
        worst = max(worst, dev)
        if dev > 1e-12:
            mism += 1
    reports.append(OracleReport("chamfer", instances, mism, worst))
    return reports


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    loss: str
    tensors: int
    probes: int
    skipped: int
    max_rel_err: float
    worst_parameter: str

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= 1e-4 and self.probes > 0


def _central_difference(loss_fn, flat: np.ndarray, idx: int,
                        step: float) -> tuple[float, bool]:
    """Two-scale secant; reports not-smooth when the scales disagree.

    A relu/max kink inside the stencil bends the secant differently at each
    scale; genuinely smooth points agree to ~1e-10, so the 1e-6 gate is wide
    enough for noise yet far stricter than the 1e-4 assertion.
    """
    base = flat[idx]
    secants = []
    for h in (step, step / 10.0):
        flat[idx] = base + h
        up = float(loss_fn().values)
        flat[idx] = base - h
        down = float(loss_fn().values)
        flat[idx] = base
        secants.append((up - down) / (2.0 * h))
    smooth = abs(secants[0] - secants[1]) <= 1e-6 * max(1.0, abs(secants[0]))
    return secants[0], smooth


def _check_loss(store: ad.ParamStore, loss_fn, names: list[str],
                probes_per_tensor: int, step: float,
                rng: np.random.Generator) -> tuple[int, int, float, str]:
    store.zero_grads()
    loss_fn().backward()
    grads = {name: store[name].grad.copy() for name in names}
    probes = skipped = 0
    worst = 0.0
    worst_name = ""
    for name in names:
        flat = store[name].values.reshape(-1)
        count = min(probes_per_tensor, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            fd, smooth = _central_difference(loss_fn, flat, int(idx), step)
            if not smooth:
                skipped += 1
                continue
            analytic = grads[name].reshape(-1)[int(idx)]
            rel = abs(analytic - fd) / max(1.0, abs(fd))
            if rel > worst:
                worst, worst_name = rel, f"{name}[{int(idx)}]"
            probes += 1
    return probes, skipped, worst, worst_name


def gradient_suite(cfg: RunConfig | None = None, step: float = 1e-5,
                   probes_per_tensor: int = 3, seed: int = 0) -> list[GradReport]:
    """Finite-difference checks for all four losses on the toy preset.

    Each loss is checked over the parameters its tape actually reaches, plus
    any parameter that is provably inert for it (zero analytic gradient, and
    the finite difference confirms the loss does not move).  The grouping
    branch losses hold the encoded token features and the hard assignment
    fixed, exactly as the training tape does: features cross the
    stop-gradient boundary as constants and the argmax is index data.
    """
    cfg = (cfg or preset("toy")).validate()
    rng = np.random.default_rng(seed)
    kinds = [k.strip() for k in cfg.shape_kinds.split(",")]
    store = pipeline.init_model(cfg, decoder=True, pcsm_branch=True,
                                n_classes=len(kinds), csep=False)
    points = shapes.make_shape(kinds[0], cfg.n_points, seed=3).points

    # fixed masking plan from the initial assignment
    out0 = _pcsm_once(points, store, cfg)
    plan = csem_mask(out0.assignment, cfg.full_mask_components, cfg.mask_ratio,
                     np.random.default_rng(5))
    vis, msk = plan.visible_indices(), plan.masked_indices()
    tb0 = embedding.tokenize(points, store, cfg)
    target_local = tb0.local_coords[msk]

    def l3d_fn():
        tb = embedding.tokenize(points, store, cfg)
        pos = embedding.pos_embed(tb.centers, store)
        enc = backbone.encode(ad.gather_rows(tb.tokens, vis),
                              ad.gather_rows(pos, vis), store, cfg)
        _, dm = backbone.decode(enc, ad.gather_rows(pos, vis),
                                ad.gather_rows(pos, msk), store, cfg)
        return backbone.l_3d(backbone.recon_head(dm, store, cfg), target_local)

    # frozen token features and assignment for the grouping-branch losses
    te_np = out0.tokens_encoded
    pos_np = embedding.pos_embed(tb0.centers, store).values
    assignment = out0.assignment

    def proto_fn():
        p_hat = pcsm.update_prototypes(store["pcsm.prototypes"], Tensor(te_np))
        _, loss = pcsm.ppr_reconstruct(p_hat, Tensor(pos_np), assignment,
                                       points, store, cfg)
        return loss

    def cont_fn():
        p_hat = pcsm.update_prototypes(store["pcsm.prototypes"], Tensor(te_np))
        return pcsm.l_cont(p_hat, cfg.cont_temperature)

    def ce_fn():
        return ad.cross_entropy(heads.classify_baseline(points, store, cfg), 1)

    all_names = store.names()
    scopes = {
        "l_3d": (l3d_fn, [n for n in all_names if n.startswith(
            ("embed.", "enc.", "dec.", "recon."))]),
        "l_proto": (proto_fn, [n for n in all_names if n.startswith("pcsm.")]),
        "l_cont": (cont_fn, ["pcsm.prototypes", "pcsm.enhance.wq"]),
        "cross_entropy": (ce_fn, [n for n in all_names if n.startswith(
            ("embed.", "enc.", "cls."))]),
    }
    reports = []
    for loss_name, (fn, names) in scopes.items():
        probes, skipped, worst, worst_param = _check_loss(
            store, fn, names, probes_per_tensor, step, rng)
        reports.append(GradReport(loss=loss_name, tensors=len(names),
                                  probes=probes, skipped=skipped,
                                  max_rel_err=worst,
                                  worst_parameter=worst_param))
    return reports


def _pcsm_once(points: np.ndarray, store: ad.ParamStore, cfg: RunConfig):
    tb = embedding.tokenize(points, store, cfg)
    pos = embedding.pos_embed(tb.centers, store)
    return pcsm.pcsm_forward(tb.tokens.values, tb.centers, pos.values, points,
                             store, cfg)
