"""Training and evaluation orchestration.

Pre-training follows the two-branch step: the component-grouping branch runs
on the complete cloud (stop-gradient encoder pass) and yields the assignment
the masking strategy needs, then the masked-autoencoding branch reconstructs
the hidden patches.  The data stream (epoch shuffles, patch-seed draws) and
the masking stream use separate generators spawned from the run seed, so
swapping the masking strategy cannot perturb which clouds are seen in which
order - the ablation harness checks exactly that.

Ground-truth component labels exist only in the synthetic dataset and are
consumed exclusively by metrics; the loss builders receive bare point arrays.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone, checkpoint, embedding, heads, masking, metrics, pcsm, shapes
from .config import RunConfig
from .errors import ConfigError, InvariantViolation, NumericError
from .geometry import PointCloud

LOGGER = logging.getLogger("protomae.pipeline")

HELD_OUT_SEED_BASE = 1_000_000


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    clouds: list[PointCloud]
    kind_ids: np.ndarray            # (n,) int64 index into kinds
    kinds: list[str]


def build_dataset(cfg: RunConfig) -> Dataset:
    """Generate the synthetic corpus: kinds cycle, cloud i uses seed i."""
    kinds = [k.strip() for k in cfg.shape_kinds.split(",") if k.strip()]
    if len(kinds) < 2:
        raise ConfigError(f"need at least two shape kinds, got '{cfg.shape_kinds}'")
    n = len(kinds) * cfg.clouds_per_kind
    clouds, kind_ids = [], []
    for i in range(n):
        k = i % len(kinds)
        clouds.append(shapes.make_shape(kinds[k], cfg.n_points, seed=i))
        kind_ids.append(k)
    return Dataset(clouds=clouds, kind_ids=np.array(kind_ids, dtype=np.int64),
                   kinds=kinds)


def token_truth(cloud: PointCloud, member_indices: np.ndarray) -> np.ndarray:
    """Majority component label of each patch (ties to the lowest label)."""
    if cloud.labels is None:
        raise ConfigError("cloud has no component labels")
    return np.array([int(np.bincount(cloud.labels[m]).argmax())
                     for m in member_indices], dtype=np.int64)


# ---------------------------------------------------------------------------
# model assembly and hashing
# ---------------------------------------------------------------------------

def init_model(cfg: RunConfig, decoder: bool = True, pcsm_branch: bool = True,
               n_classes: int | None = None, csep: bool = False) -> ad.ParamStore:
    store = ad.ParamStore(cfg.seed)
    embedding.init_embedding_params(store, cfg)
    backbone.init_backbone_params(store, cfg, with_decoder=decoder)
    if pcsm_branch:
        pcsm.init_pcsm_params(store, cfg)
    if n_classes is not None:
        heads.init_head_params(store, cfg, n_classes, csep=csep)
    return store


def params_hash(store: ad.ParamStore) -> str:
    h = hashlib.sha256()
    for name, t in store.items():
        h.update(name.encode("utf-8"))
        h.update(t.values.tobytes())
    return h.hexdigest()


def _batch_hash(clouds: list[PointCloud], starts: list[int]) -> str:
    h = hashlib.sha256()
    for cloud, start in zip(clouds, starts):
        h.update(cloud.points.tobytes())
        h.update(int(start).to_bytes(8, "little"))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

def _make_plan(cfg: RunConfig, assignment: np.ndarray, centers: np.ndarray,
               mask_rng: np.random.Generator) -> masking.MaskPlan:
    if cfg.mask_strategy == "randm":
        return masking.random_mask(assignment.size, cfg.mask_ratio, mask_rng)
    if cfg.mask_strategy == "randbm":
        return masking.block_mask(centers, cfg.mask_ratio, mask_rng)
    return masking.csem_mask(assignment, cfg.full_mask_components,
                             cfg.mask_ratio, mask_rng)


def _mean_term(terms: list[ad.Tensor]) -> ad.Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(terms))


@dataclass
class PretrainResult:
    store: ad.ParamStore
    metrics: list[dict]
    mask_log: list[dict]
    init_hash: str
    data_hash: str
    checkpoint_path: Path | None
    wall_seconds: float


def pretrain(cfg: RunConfig, out_dir: str | Path | None = None) -> PretrainResult:
    """Run the full pre-training loop; see the module docstring for the step.

    Writes ``metrics.jsonl`` (one object per epoch), ``masks.jsonl`` (one
    object per cloud per step), and ``checkpoint.bin`` under ``out_dir`` when
    given.  Metric files contain no wall-clock fields, so identical seeds
    produce byte-identical streams.
    """
    cfg.validate()
    t0 = time.monotonic()
    ds = build_dataset(cfg)
    store = init_model(cfg, decoder=True, pcsm_branch=True)
    init_hash = params_hash(store)
    data_rng, mask_rng = (np.random.default_rng(c)
                          for c in np.random.SeedSequence(cfg.seed).spawn(2))
    opt = ad.AdamW(store, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                   weight_decay=cfg.weight_decay)
    n = len(ds.clouds)
    if n < cfg.batch_size:
        raise ConfigError(f"{n} clouds cannot fill a batch of {cfg.batch_size}")
    steps = n // cfg.batch_size
    epoch_rows: list[dict] = []
    mask_log: list[dict] = []
    data_hash = ""
    for epoch in range(cfg.epochs):
        frac = epoch / max(1, cfg.epochs - 1)
        plr = cfg.proto_learning_rate * (1.0 - frac + frac * cfg.proto_lr_decay)
        opt.overrides["pcsm.prototypes"] = (plr, cfg.proto_weight_decay)
        order = np.arange(n)
        data_rng.shuffle(order)
        sums = {"l_3d": 0.0, "l_proto": 0.0, "l_cont": 0.0, "total": 0.0}
        entropy_sum = purity_sum = 0.0
        for step in range(steps):
            batch = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            starts = [int(data_rng.integers(cfg.n_points)) for _ in batch]
            if epoch == 0 and step == 0:
                data_hash = _batch_hash([ds.clouds[i] for i in batch], starts)
            terms = {"l_3d": [], "l_proto": [], "l_cont": []}
            try:
                for ci, start in zip(batch, starts):
                    cloud = ds.clouds[ci]
                    tb = embedding.tokenize(cloud.points, store, cfg, start=start)
                    pos = embedding.pos_embed(tb.centers, store)
                    out = pcsm.pcsm_forward(tb.tokens.values, tb.centers,
                                            pos.values, cloud.points, store, cfg)
                    plan = _make_plan(cfg, out.assignment, tb.centers, mask_rng)
                    vis, msk = plan.visible_indices(), plan.masked_indices()
                    enc = backbone.encode(ad.gather_rows(tb.tokens, vis),
                                          ad.gather_rows(pos, vis), store, cfg)
                    _, dm = backbone.decode(enc, ad.gather_rows(pos, vis),
                                            ad.gather_rows(pos, msk), store, cfg)
                    l3d = backbone.l_3d(backbone.recon_head(dm, store, cfg),
                                        tb.local_coords[msk])
                    terms["l_3d"].append(l3d)
                    terms["l_proto"].append(out.loss_proto)
                    terms["l_cont"].append(out.loss_cont)
                    entropy_sum += metrics.group_entropy(out.assignment,
                                                         cfg.n_prototypes)
                    purity_sum += metrics.purity(out.assignment,
                                                 token_truth(cloud, tb.member_indices))
                    cov_sel, cov_max = masking.component_coverage(plan, out.assignment)
                    mask_log.append({
                        "epoch": epoch + 1, "step": step + 1, "cloud": int(ci),
                        "strategy": cfg.mask_strategy,
                        "bits": plan.bitstring(),
                        "selected": [int(c) for c in plan.fully_masked_components],
                        "coverage_selected": cov_sel,
                        "coverage_max": cov_max,
                    })
                means = {name: _mean_term(ts) for name, ts in terms.items()}
                total = ad.add(means["l_3d"],
                               ad.add(ad.scale(means["l_proto"], cfg.lambda_proto),
                                      ad.scale(means["l_cont"], cfg.lambda_cont)))
                total.backward()
                opt.step()
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch + 1} step {step + 1}: {exc}") from None
            for name, t in means.items():
                sums[name] += float(t.values)
            sums["total"] += float(total.values)
        clouds_seen = steps * cfg.batch_size
        epoch_rows.append({
            "epoch": epoch + 1,
            "l_3d": sums["l_3d"] / steps,
            "l_proto": sums["l_proto"] / steps,
            "l_cont": sums["l_cont"] / steps,
            "total": sums["total"] / steps,
            "grouping_entropy": entropy_sum / clouds_seen,
            "component_purity": purity_sum / clouds_seen,
        })
        LOGGER.info("pretrain epoch %d/%d total %.6f (%.1fs)", epoch + 1,
                    cfg.epochs, epoch_rows[-1]["total"], time.monotonic() - t0)
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out_dir / "metrics.jsonl", epoch_rows)
        _write_jsonl(out_dir / "masks.jsonl", mask_log)
        ckpt_path = out_dir / "checkpoint.bin"
        checkpoint.save(ckpt_path, store, cfg, data_rng)
    return PretrainResult(store=store, metrics=epoch_rows, mask_log=mask_log,
                          init_hash=init_hash, data_hash=data_hash,
                          checkpoint_path=ckpt_path,
                          wall_seconds=time.monotonic() - t0)


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def split_dataset(ds: Dataset, val_fraction: float,
                  split_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/validation split, deterministic in the split seed."""
    rng = np.random.default_rng(split_seed)
    train, val = [], []
    for k in range(len(ds.kinds)):
        members = np.flatnonzero(ds.kind_ids == k)
        perm = rng.permutation(members)
        n_val = int(round(val_fraction * members.size))
        val.extend(perm[:n_val])
        train.extend(perm[n_val:])
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


@dataclass
class FinetuneResult:
    store: ad.ParamStore
    metrics: list[dict]
    train_accuracy: float
    val_accuracy: float
    checkpoint_path: Path | None


def finetune(cfg: RunConfig, ckpt: str | Path | checkpoint.Checkpoint,
             csep: bool, out_dir: str | Path | None = None) -> FinetuneResult:
    """Train a classification head on top of a pre-training checkpoint.

    The decoder is dropped; encoder, embeddings, class token, head, and (for
    the prompted variant) the prototype bank and its branch layers are all
    trainable.  Stops early once the train accuracy reaches
    ``cfg.stop_train_accuracy``.
    """
    cfg.validate()
    ck = ckpt if isinstance(ckpt, checkpoint.Checkpoint) else checkpoint.load(ckpt)
    ds = build_dataset(cfg)
    n_classes = len(ds.kinds)
    store = init_model(cfg, decoder=False, pcsm_branch=csep,
                       n_classes=n_classes, csep=csep)
    checkpoint.load_into(store, ck, strict=False)
    if csep and "pcsm.prototypes" not in ck.tensors:
        raise ConfigError("prompted fine-tuning needs prototypes in the checkpoint")
    classify = heads.classify_csep if csep else heads.classify_baseline
    opt = ad.AdamW(store, lr=cfg.finetune_learning_rate,
                   betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    train_idx, val_idx = split_dataset(ds, cfg.val_fraction, cfg.split_seed)
    rng = np.random.default_rng([cfg.seed, 17])
    rows: list[dict] = []
    train_acc = val_acc = 0.0
    for epoch in range(cfg.finetune_epochs):
        order = train_idx.copy()
        rng.shuffle(order)
        correct = 0
        ce_sum = 0.0
        for lo in range(0, order.size, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            try:
                losses = []
                for ci in batch:
                    logits = classify(ds.clouds[ci].points, store, cfg)
                    label = int(ds.kind_ids[ci])
                    losses.append(ad.cross_entropy(logits, label))
                    correct += int(np.argmax(logits.values) == label)
                batch_ce = _mean_term(losses)
                ce_sum += float(batch_ce.values) * batch.size
                batch_ce.backward()
                opt.step()
            except NumericError as exc:
                raise NumericError(f"fine-tune epoch {epoch + 1}: {exc}") from None
        train_acc = correct / order.size
        val_correct = sum(
            int(np.argmax(classify(ds.clouds[ci].points, store, cfg).values)
                == int(ds.kind_ids[ci]))
            for ci in val_idx)
        val_acc = val_correct / val_idx.size
        rows.append({"epoch": epoch + 1, "ce": ce_sum / order.size,
                     "train_accuracy": train_acc, "val_accuracy": val_acc})
        LOGGER.info("finetune%s epoch %d/%d train %.3f val %.3f",
                    " (prompted)" if csep else "", epoch + 1,
                    cfg.finetune_epochs, train_acc, val_acc)
        if train_acc >= cfg.stop_train_accuracy:
            break
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        name = "csep" if csep else "baseline"
        _write_jsonl(out_dir / f"finetune-{name}.jsonl", rows)
        ckpt_path = out_dir / f"finetune-{name}.bin"
        checkpoint.save(ckpt_path, store, cfg, rng)
    return FinetuneResult(store=store, metrics=rows, train_accuracy=train_acc,
                          val_accuracy=val_acc, checkpoint_path=ckpt_path)


# ---------------------------------------------------------------------------
# masking ablation
# ---------------------------------------------------------------------------

def coverage_audit(mask_log: list[dict]) -> dict:
    """Coverage statistics from a run's mask plans.

    ``selected_full_rate``: over plans that selected components, the fraction
    whose selected components were completely masked (1.0 is the strategy
    contract).  ``mean_best_coverage``: mean of the best per-component
    coverage over all plans, defined for every strategy.
    """
    with_sel = [row for row in mask_log if row["selected"]]
    full = sum(1 for row in with_sel if row["coverage_selected"] == 1.0)
    best = [row["coverage_max"] for row in mask_log]
    return {
        "plans": len(mask_log),
        "plans_with_selection": len(with_sel),
        "selected_full_rate": full / len(with_sel) if with_sel else None,
        "mean_best_coverage": float(np.mean(best)) if best else None,
    }


def ablate(cfg: RunConfig, strategies: list[str],
           out_dir: str | Path | None = None) -> list[dict]:
    """Pretrain + fine-tune once per masking strategy under shared seeds.

    All runs share the initial weights and the data stream; the run aborts if
    the recorded hashes ever differ, because then the comparison would be
    measuring more than the masking strategy.
    """
    known = ("randm", "randbm", "csem")
    bad = [s for s in strategies if s not in known]
    if bad:
        raise ConfigError(f"unknown masking strategies {bad}; pick from {known}")
    if not strategies:
        raise ConfigError("no masking strategies requested")
    rows = []
    ref_init = ref_data = None
    for strat in strategies:
        sub = dataclasses.replace(cfg, mask_strategy=strat).validate()
        sdir = Path(out_dir) / strat if out_dir is not None else None
        res = pretrain(sub, sdir)
        if ref_init is None:
            ref_init, ref_data = res.init_hash, res.data_hash
        elif (res.init_hash, res.data_hash) != (ref_init, ref_data):
            raise InvariantViolation(
                f"strategy '{strat}' diverged from the shared init/data stream")
        audit = coverage_audit(res.mask_log)
        ft = finetune(sub,
                      checkpoint.from_store(res.store, sub,
                                            np.random.default_rng(sub.seed)),
                      csep=False, out_dir=sdir)
        final = res.metrics[-1]
        rows.append({
            "strategy": strat,
            "l_3d": final["l_3d"],
            "l_proto": final["l_proto"],
            "l_cont": final["l_cont"],
            "total": final["total"],
            "component_purity": final["component_purity"],
            "selected_full_rate": audit["selected_full_rate"],
            "mean_best_coverage": audit["mean_best_coverage"],
            "downstream_accuracy": ft.val_accuracy,
            "init_hash": res.init_hash,
            "data_hash": res.data_hash,
        })
    if out_dir is not None:
        out_path = Path(out_dir) / "ablation.csv"
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# grouping evaluation and export
# ---------------------------------------------------------------------------

def cloud_assignment(store: ad.ParamStore, points: np.ndarray,
                     cfg: RunConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(per-point component ids, per-token assignment, member_indices).

    Each point inherits the assignment of the token whose patch centre is
    nearest (ties to the lowest token index).
    """
    tb = embedding.tokenize(points, store, cfg, start=0)
    pos = embedding.pos_embed(tb.centers, store)
    out = pcsm.pcsm_forward(tb.tokens.values, tb.centers, pos.values, points,
                            store, cfg)
    d2 = ((np.asarray(points, dtype=np.float64)[:, None, :]
           - tb.centers[None, :, :]) ** 2).sum(axis=-1)
    nearest = d2.argmin(axis=1)
    return out.assignment[nearest], out.assignment, tb.member_indices


def evaluate_grouping(store: ad.ParamStore, cfg: RunConfig, kind: str = "plane",
                      n_clouds: int = 16, draws: int = 100,
                      seed_base: int = HELD_OUT_SEED_BASE) -> dict:
    """Token-level grouping NMI on held-out clouds vs a random baseline.

    The held-out clouds use seeds far outside the training range.  The random
    baseline is the mean NMI of ``draws`` uniform Q-way assignments against
    the same ground truth, freshly drawn in-run.
    """
    rng = np.random.default_rng([cfg.seed, 101])
    scores, baselines = [], []
    for s in range(n_clouds):
        cloud = shapes.make_shape(kind, cfg.n_points, seed=seed_base + s)
        _, assignment, member_indices = cloud_assignment(store, cloud.points, cfg)
        truth = token_truth(cloud, member_indices)
        scores.append(metrics.nmi(assignment, truth))
        baselines.append(metrics.random_nmi_baseline(truth, cfg.n_prototypes,
                                                     draws, rng))
    return {"kind": kind, "n_clouds": n_clouds,
            "nmi_mean": float(np.mean(scores)),
            "nmi_per_cloud": [float(x) for x in scores],
            "random_mean": float(np.mean(baselines))}


def export_groups(store: ad.ParamStore, points: np.ndarray, cfg: RunConfig,
                  out_path: str | Path) -> np.ndarray:
    """Write one ``x y z component`` line per point; returns the labels."""
    point_labels, _, _ = cloud_assignment(store, points, cfg)
    points = np.asarray(points, dtype=np.float64)
    lines = [f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {int(label)}"
             for p, label in zip(points, point_labels)]
    Path(out_path).write_text("\n".join(lines) + "\n")
    return point_labels
