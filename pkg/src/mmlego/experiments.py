"""Experiment harnesses shared by the CLI, the scripts and the acceptance tests."""

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import training
from .datagen import ModalitySource, MultiSource, apply_overlap, generate
from .legoblock import LegoBlock
from .legofuse import build_fused, fine_tune
from .legomerge import LogitEnsemble, SlerpSpec, merge_blocks

log = logging.getLogger(__name__)


@dataclass
class Split:
    """A dataset with one fold selected and survival bin edges fixed from its training part."""

    dataset: object
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    edges: np.ndarray = None

    @classmethod
    def from_fold(cls, dataset, fold=0):
        tr, va, te = dataset.folds[fold]
        edges = dataset.bin_edges(tr) if dataset.task.kind == "survival" else None
        return cls(dataset, tr, va, te, edges)

    def labels(self, idx):
        return self.dataset.labels(idx, self.edges)

    def part(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def make_block(cfg, dataset, modality, seed):
    m = dataset.modalities[modality]
    enc = cfg.encoders.for_modality(m.kind, m.dim)
    return LegoBlock(modality, enc, cfg.lego.block_config(), dataset.task, seed=seed,
                     init_seed=seed)


def train_block(cfg, split, modality, seed=0):
    """Train one block on the training samples where ``modality`` is available."""
    ds = split.dataset
    block = make_block(cfg, ds, modality, seed)
    tr = ds.available(modality, split.train)
    va = ds.available(modality, split.val)
    if ds.modalities[modality].kind == "tabular":
        block.fit_normaliser(ds.modalities[modality].values[tr])
    t0 = time.perf_counter()
    result = training.fit(block, ModalitySource(ds, modality, tr), split.labels(tr),
                          ModalitySource(ds, modality, va), split.labels(va), ds.task,
                          epochs=cfg.train.epochs, lr=cfg.train.lr, batch_size=cfg.train.batch,
                          l1=cfg.train.l1, early_stopping_patience=cfg.train.patience,
                          scheduler_patience=cfg.train.scheduler_patience,
                          scheduler_factor=cfg.train.scheduler_factor, rng=[seed, 3])
    info = {"modality": modality, "n_train": len(tr), "seconds": time.perf_counter() - t0,
            "epochs_run": len(result.history), "best_epoch": result.best_epoch,
            "steps": result.steps, "history": result.history,
            "epoch_seconds": float(np.mean([h["seconds"] for h in result.history]))
            if result.history else float("nan")}
    return block, info


def evaluate(model, split, part="test", mask=()):
    """Metric of ``model`` on one part of the split.

    Blocks are scored on the samples that have their modality; multimodal
    models on every sample, with ``mask`` modalities hidden.
    """
    ds = split.dataset
    idx = split.part(part)
    if model.kind == "block":
        idx = ds.available(model.modality, idx)
        source = ModalitySource(ds, model.modality, idx)
    else:
        source = MultiSource(ds, idx, mask)
    _, metric, _ = training.evaluate(model, source, split.labels(idx), ds.task)
    return metric


def merge(cfg, blocks):
    """LegoMerge with the configured head interpolation and phase mode; timed."""
    steps0 = training.gradient_step_count()
    t0 = time.perf_counter()
    model = merge_blocks(blocks, SlerpSpec(cfg.lego.alpha), cfg.lego.phase_mode)
    seconds = time.perf_counter() - t0
    return model, {"seconds": seconds, "gradient_steps": training.gradient_step_count() - steps0}


def fuse(cfg, split, blocks, seed=0, method=None, epochs=None):
    """LegoFuse fine-tuned on the paired training samples."""
    ds = split.dataset
    paired = split.train[ds.availability[split.train].all(axis=1)]
    model = build_fused(blocks, method or cfg.lego.fuse_method, SlerpSpec(cfg.lego.alpha),
                        phase_mode=cfg.lego.phase_mode)
    t0 = time.perf_counter()
    model, report = fine_tune(model, MultiSource(ds, paired), split.labels(paired),
                              MultiSource(ds, split.val), split.labels(split.val),
                              epochs=cfg.lego.tune_epochs if epochs is None else epochs,
                              lr=cfg.lego.tune_lr, batch_size=cfg.train.batch,
                              l1=cfg.train.l1, rng=[seed, 5])
    report["seconds"] = time.perf_counter() - t0
    report["n_paired"] = len(paired)
    return model, report


def run_seed(cfg, seed, fold=0, with_fuse=True, masks=True):
    """Blocks, merge, ensemble and (optionally) fuse for one seed.

    Returns ``(rows, artefacts)``: rows are ``{seed, model, metric, ...}``
    dicts for the test split.
    """
    ds = generate(replace(cfg.data, seed=seed))
    split = Split.from_fold(ds, fold)
    rows, blocks, infos = [], [], {}
    for m in ds.modality_names:
        block, info = train_block(cfg, split, m, seed)
        blocks.append(block)
        infos[m] = info
        rows.append({"seed": seed, "model": f"block:{m}", "metric": evaluate(block, split)})
        log.info("seed %d block %s test %.4f", seed, m, rows[-1]["metric"])
    merged, mreport = merge(cfg, blocks)
    rows.append({"seed": seed, "model": "merge", "metric": evaluate(merged, split)})
    ens = LogitEnsemble(blocks)
    rows.append({"seed": seed, "model": "ensemble", "metric": evaluate(ens, split)})
    if masks:
        for m in ds.modality_names:
            rows.append({"seed": seed, "model": f"merge:mask-{m}",
                         "metric": evaluate(merged, split, mask=(m,))})
    art = {"dataset": ds, "split": split, "blocks": blocks, "block_info": infos,
           "merged": merged, "merge_report": mreport, "ensemble": ens}
    if with_fuse:
        fused, freport = fuse(cfg, split, blocks, seed)
        rows.append({"seed": seed, "model": f"fuse:{fused.fuse_method}",
                     "metric": evaluate(fused, split)})
        art.update(fused=fused, fuse_report=freport)
    return rows, art


def overlap_sweep(cfg, rhos=(0.0, 0.25, 0.5, 0.75, 1.0), seeds=(0, 1, 2, 3, 4), fold=0):
    """Train per-modality blocks on rho-determined sample sets; merge; score on test.

    Returns rows ``{rho, seed, model, metric}`` for the merged model, the
    logit-averaging ensemble and each block.
    """
    rows = []
    for seed in seeds:
        base = generate(replace(cfg.data, seed=seed, overlap=1.0))
        tr = base.folds[fold][0]
        for rho in rhos:
            ds = apply_overlap(base, tr, rho, seed)
            split = Split.from_fold(ds, fold)
            blocks = [train_block(cfg, split, m, seed)[0] for m in ds.modality_names]
            merged, _ = merge(cfg, blocks)
            for b in blocks:
                rows.append({"rho": rho, "seed": seed, "model": f"block:{b.modality}",
                             "metric": evaluate(b, split)})
            rows.append({"rho": rho, "seed": seed, "model": "merge",
                         "metric": evaluate(merged, split)})
            rows.append({"rho": rho, "seed": seed, "model": "ensemble",
                         "metric": evaluate(LogitEnsemble(blocks), split)})
            log.info("seed %d rho %.2f merge %.4f", seed, rho, rows[-2]["metric"])
    return rows


SPECTRAL_SIZES = ((2, 2), (4, 4), (8, 16), (17, 126))


def spectral_checks(sizes=SPECTRAL_SIZES, seed=0, tol_roundtrip=1e-10, tol_parseval=1e-9,
                    tol_oracle=1e-9):
    """Round trip, Parseval and naive-DFT agreement on random matrices.

    Returns rows ``{size, check, value, tol, passed}``.
    """
    from .fft import naive_dft
    from .spectral import dft2, inverse_dft2, parseval_check

    rng = np.random.default_rng(seed)
    rows = []
    for c, d in sizes:
        x, y = rng.normal(size=(c, d)), rng.normal(size=(c, d))
        z = dft2(x)
        back = inverse_dft2(z)
        oracle = naive_dft(naive_dft(x.astype(complex)).T).T / np.sqrt(c * d)
        checks = {
            "roundtrip_max_abs": (float(np.abs(back - x).max()), tol_roundtrip),
            "parseval_relative": (parseval_check(x, y)["relative"], tol_parseval),
            "naive_dft_max_abs": (float(np.abs(z.to_complex() - oracle).max()), tol_oracle),
        }
        for name, (value, tol) in checks.items():
            rows.append({"size": f"{c}x{d}", "check": name, "value": value, "tol": tol,
                         "passed": value < tol})
    return rows
