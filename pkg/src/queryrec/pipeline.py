"""Three-phase training pipeline and checkpoint plumbing.

Phase A fits the diffusion denoiser on query-item vectors, phase B enlarges
the positive sets of sparse queries, and phase C trains the joint CTR model
with the enlarged sets held fixed.
"""

from __future__ import annotations

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, check_shapes, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config_text
from .data import DatasetBundle, load_bundle
from .diffusion import DiffusionAugmenter, write_enhanced_tsv
from .model import QueryRecClassifier, write_metrics
from .synthetic import generate_synthetic

CHECKPOINT_NAME = "model.qrec"
METRICS_NAME = "metrics.jsonl"


def make_dataset(cfg: RunConfig) -> DatasetBundle:
    """Load ``cfg.data_dir`` or generate the configured synthetic dataset."""
    if cfg.data_dir:
        return load_bundle(cfg.data_dir, l_max=cfg.l_max, window=cfg.window)
    synthetic = replace(cfg.synthetic, l_max=cfg.l_max, window=cfg.window)
    return generate_synthetic(synthetic, seed=cfg.synth_seed)


def make_augmenter(cfg: RunConfig) -> DiffusionAugmenter:
    return DiffusionAugmenter(
        n_steps=cfg.diffusion_steps,
        beta_min=cfg.diffusion_beta_min,
        beta_max=cfg.diffusion_beta_max,
        r_p=cfg.diffusion_r_p,
        r_n=cfg.diffusion_r_n,
        mask_rate=cfg.diffusion_mask_rate,
        top_k=cfg.diffusion_top_k,
        train_steps=cfg.diffusion_train_steps,
        batch_size=cfg.diffusion_batch_size,
        lr=cfg.diffusion_lr,
        start_step=None if cfg.diffusion_start_step < 0 else cfg.diffusion_start_step,
        sparse_max=cfg.diffusion_sparse_max,
        seed=cfg.seed,
        dtype="float32",
    )


def make_estimator(cfg: RunConfig) -> QueryRecClassifier:
    return QueryRecClassifier(
        d=cfg.d,
        att_hidden=cfg.att_hidden,
        head_hidden=tuple(cfg.head_hidden),
        sas_blocks=cfg.sas_blocks,
        sas_heads=cfg.sas_heads,
        use_query_feature=cfg.use_query_feature,
        n_pos=cfg.n_pos,
        n_neg=cfg.n_neg,
        n_ctr_pos=cfg.n_ctr_pos,
        n_ctr_neg=cfg.n_ctr_neg,
        beta_ctr=cfg.beta_ctr,
        lambda2=cfg.lambda2,
        lambda3=cfg.lambda3,
        augmenter=make_augmenter(cfg) if cfg.use_diffusion else None,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        patience=cfg.patience,
        seed=cfg.seed,
    )


def model_tensors(model: QueryRecClassifier) -> dict[str, np.ndarray]:
    """Every learnable tensor: the CTR model's plus the denoiser's when present."""
    tensors = {name: value for name, value in model.params_.items()}
    if getattr(model, "augmenter_", None) is not None:
        tensors.update(model.augmenter_.params_.items())
    return tensors


def train(cfg: RunConfig, out_dir=None, clock=time.perf_counter, bundle: DatasetBundle | None = None):
    """Run all three phases; write the best checkpoint and the metrics log to ``out_dir``."""
    cfg.validate()
    bundle = bundle if bundle is not None else make_dataset(cfg)
    model = make_estimator(cfg).fit(bundle, clock=clock)
    if out_dir is not None:
        out_dir = Path(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(out_dir / CHECKPOINT_NAME, model_tensors(model), cfg.dumps(), model.best_step_)
        write_metrics(out_dir / METRICS_NAME, model.metrics_)
    return model


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    cfg = RunConfig.from_flat(parse_config_text(ckpt.config_text))
    cfg.validate()
    return cfg


def restore_model(ckpt: Checkpoint, bundle: DatasetBundle | None = None):
    """Rebuild the trained estimator (and its dataset) from a checkpoint."""
    cfg = config_from_checkpoint(ckpt)
    bundle = bundle if bundle is not None else make_dataset(cfg)
    model = make_estimator(cfg)
    store = model.init_params(bundle)
    check_shapes({name: value.shape for name, value in store.items()}, ckpt.tensors)
    model.load_params(ckpt.tensors)
    model.augmenter_ = None
    denoiser = ckpt.subset("denoiser.")
    if denoiser:
        model.augmenter_ = make_augmenter(cfg).set_params(n_items=bundle.vocab.n_items).load_params(denoiser)
    model.classes_ = np.array([0, 1])
    model.best_step_ = ckpt.step
    return cfg, bundle, model


def load_model(path, bundle: DatasetBundle | None = None):
    return restore_model(load_checkpoint(path), bundle)


def train_diffusion(cfg: RunConfig, out_path, bundle: DatasetBundle | None = None) -> DiffusionAugmenter:
    """Phase A only: fit the denoiser and save it with the config snapshot."""
    cfg.validate()
    bundle = bundle if bundle is not None else make_dataset(cfg)
    aug = make_augmenter(cfg).set_params(n_items=bundle.vocab.n_items).fit(bundle.query_items)
    save_checkpoint(out_path, dict(aug.params_.items()), cfg.dumps(), aug.train_steps)
    return aug


def augment(ckpt_path, out_tsv, bundle: DatasetBundle | None = None):
    """Phase B only: enlarge sparse positive sets with a saved denoiser and write them as TSV."""
    ckpt = load_checkpoint(ckpt_path)
    cfg = config_from_checkpoint(ckpt)
    bundle = bundle if bundle is not None else make_dataset(cfg)
    denoiser = ckpt.subset("denoiser.")
    if not denoiser:
        raise KeyError(f"{ckpt_path}: no denoiser tensors in checkpoint")
    aug = make_augmenter(cfg).set_params(n_items=bundle.vocab.n_items).load_params(denoiser)
    sets = aug.transform(bundle.query_items)
    write_enhanced_tsv(out_tsv, sets)
    return sets
