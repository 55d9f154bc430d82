"""Training recipes: teacher, student, regulated model, ensemble, distillation.

Every function takes a :class:`SpikeDataset` and a :class:`TrainConfig`,
trains on the ``train`` split, selects epochs on ``val`` and returns a
fitted estimator.
"""
from dataclasses import asdict, dataclass
import logging

import numpy as np

from ._seeding import hash64
from .estimators import (EnsembleRegressor, HistogramEncoderRegressor,
                         RegulatedTransformerRegressor)

logger = logging.getLogger(__name__)

TEACHER_BINS = 30
STUDENT_BINS = 10


@dataclass
class TrainConfig:
    """Optimizer settings per model family.

    The unprefixed fields drive the point-cloud encoders; ``image_*`` the
    regulated models and ``ensemble_*`` the fusion head.
    """

    learning_rate: float = 2e-3
    batch_size: int = 8
    epochs: int = 60
    image_learning_rate: float = 1e-3
    image_batch_size: int = 16
    image_epochs: int = 100
    ensemble_learning_rate: float = 1e-3
    ensemble_batch_size: int = 16
    ensemble_epochs: int = 30
    rng_seed: int = 0
    points_per_step: int = 256
    width: float = 60.0

    def __post_init__(self):
        for prefix in ("", "image_", "ensemble_"):
            if not getattr(self, prefix + "learning_rate") > 0:
                raise ValueError(f"{prefix}learning_rate must be positive")
            if getattr(self, prefix + "epochs") < 0:
                raise ValueError(f"{prefix}epochs must be >= 0")
            if getattr(self, prefix + "batch_size") < 1:
                raise ValueError(f"{prefix}batch_size must be >= 1")

    def seed(self, stage):
        return hash64(self.rng_seed, stage)

    def as_dict(self):
        return asdict(self)


def _split(dataset, name):
    return dataset.indices(name)


def _encoder(config, bins, stage, **kw):
    return HistogramEncoderRegressor(bins=bins, epochs=config.epochs, batch_size=config.batch_size,
                                     learning_rate=config.learning_rate,
                                     points_per_step=config.points_per_step,
                                     random_state=config.seed(stage), **kw)


def _rt(config, stage, **kw):
    return RegulatedTransformerRegressor(epochs=config.image_epochs,
                                         batch_size=config.image_batch_size,
                                         learning_rate=config.image_learning_rate,
                                         random_state=config.seed(stage), **kw)


def train_teacher(dataset, config):
    """Encoder on complete scan clouds, 30-bin histograms."""
    tr, va = _split(dataset, "train"), _split(dataset, "val")
    feats = lambda idx: dataset.histograms("scan", TEACHER_BINS, config.width, idx)
    model = _encoder(config, TEACHER_BINS, "teacher")
    return model.fit(feats(tr), dataset.volumes[tr], X_val=feats(va) if len(va) else None,
                     y_val=dataset.volumes[va] if len(va) else None)


def train_student(dataset, teacher, config, lam=5.0, alpha=0.2):
    """Encoder on partial field clouds, 10-bin histograms, aligned to the teacher.

    The frozen teacher's latent of the same spike's scan cloud is the
    alignment target.
    """
    tr, va = _split(dataset, "train"), _split(dataset, "val")
    teacher_z = teacher.transform(dataset.histograms("scan", TEACHER_BINS, config.width, tr))
    feats = lambda idx: dataset.histograms("field", STUDENT_BINS, config.width, idx)
    model = _encoder(config, STUDENT_BINS, "student", lam=lam, alpha=alpha)
    return model.fit(feats(tr), dataset.volumes[tr], teacher_latent=teacher_z,
                     X_val=feats(va) if len(va) else None,
                     y_val=dataset.volumes[va] if len(va) else None)


def train_field_baseline(dataset, config):
    """Student architecture trained on field clouds without a teacher."""
    tr, va = _split(dataset, "train"), _split(dataset, "val")
    feats = lambda idx: dataset.histograms("field", STUDENT_BINS, config.width, idx)
    model = _encoder(config, STUDENT_BINS, "student")
    return model.fit(feats(tr), dataset.volumes[tr], X_val=feats(va) if len(va) else None,
                     y_val=dataset.volumes[va] if len(va) else None)


def train_regulated(dataset, config, view_weight=1.0):
    """Regulated multi-view model; ``view_weight=0`` is the unregulated ablation."""
    tr, va = _split(dataset, "train"), _split(dataset, "val")
    model = _rt(config, "rt", view_weight=view_weight)
    return model.fit(dataset.views(tr), dataset.volumes[tr],
                     X_val=dataset.views(va) if len(va) else None,
                     y_val=dataset.volumes[va] if len(va) else None)


def ensemble_inputs(dataset, idx, width=60.0):
    return list(zip(dataset.views(idx), dataset.histograms("field", STUDENT_BINS, width, idx)))


def train_ensemble(rt, student, dataset, config):
    """Fusion head on the frozen regulated-model token and student latent."""
    if rt.dim + student.latent <= 0:
        raise ValueError("latent sizes must be positive")
    tr, va = _split(dataset, "train"), _split(dataset, "val")
    model = EnsembleRegressor(rt, student, epochs=config.ensemble_epochs,
                              batch_size=config.ensemble_batch_size,
                              learning_rate=config.ensemble_learning_rate,
                              random_state=config.seed("ensemble"))
    return model.fit(ensemble_inputs(dataset, tr, config.width), dataset.volumes[tr],
                     X_val=ensemble_inputs(dataset, va, config.width) if len(va) else None,
                     y_val=dataset.volumes[va] if len(va) else None)


def distill_features(ensemble, dataset, config, beta=0.2, gamma=0.2):
    """Fresh regulated model whose projected token is aligned to the ensemble's ``h``."""
    tr, va = _split(dataset, "train"), _split(dataset, "val")
    teacher_h = ensemble.fused_latent(ensemble_inputs(dataset, tr, config.width))
    model = _rt(config, "rt", beta=beta, gamma=gamma)
    return model.fit(dataset.views(tr), dataset.volumes[tr], teacher_h=teacher_h,
                     X_val=dataset.views(va) if len(va) else None,
                     y_val=dataset.volumes[va] if len(va) else None)


def _mae(model_predict, X, y):
    return float(np.mean(np.abs(model_predict(X) - y)))


def distill_pseudolabels(ensemble, dataset, config, unlabeled=None, refresh=True):
    """Regulated model trained on labelled plus ensemble-labelled spikes.

    ``unlabeled`` defaults to ``dataset.unlabeled``; all its spikes must come
    from training families. With ``refresh``, one further round is run: an
    ensemble is refitted on the new image model and, if it improves the
    validation MAE, relabels the unlabelled spikes for a final retrain.
    """
    tr, va = _split(dataset, "train"), _split(dataset, "val")
    unlabeled = dataset.unlabeled if unlabeled is None else unlabeled
    has_val = len(va) > 0
    X_val = dataset.views(va) if has_val else None
    y_val = dataset.volumes[va] if has_val else None
    if unlabeled is None or len(unlabeled) == 0:
        model = _rt(config, "rt")
        return model.fit(dataset.views(tr), dataset.volumes[tr], X_val=X_val, y_val=y_val)
    train_fams = set(np.unique(dataset.families[tr]).tolist())
    if not set(np.unique(unlabeled.families).tolist()) <= train_fams:
        raise ValueError("unlabelled spikes must come from training families only")

    u_idx = np.arange(len(unlabeled))
    u_inputs = ensemble_inputs(unlabeled, u_idx, config.width)

    def fit_on(pseudo):
        model = _rt(config, "rt")
        X = dataset.views(tr) + unlabeled.views(u_idx)
        y = np.concatenate([dataset.volumes[tr], pseudo])
        return model.fit(X, y, X_val=X_val, y_val=y_val)

    model = fit_on(ensemble.predict(u_inputs))
    if refresh and has_val:
        new_ens = train_ensemble(model, ensemble.cloud_model, dataset, config)
        val_inputs = ensemble_inputs(dataset, va, config.width)
        old = _mae(ensemble.predict, val_inputs, y_val)
        new = _mae(new_ens.predict, val_inputs, y_val)
        logger.info("ensemble refresh: val MAE %.2f -> %.2f", old, new)
        if new < old:
            model = fit_on(new_ens.predict(u_inputs))
    return model
