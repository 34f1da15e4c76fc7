"""Three-stage protocol driver: source training, target fine-tuning, testing.

Also holds the run configuration (flat key = value text files), the IoU
evaluation, the intra/cross object similarity analysis, and report output.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, fields, asdict
from pathlib import Path

import numpy as np

from .adaptor import AdaptConfig, LossWeights, adapt_step, predict_query, train_step_loss
from .augment import AugSpec, derive_query
from .autodiff import NumericError
from .encoder import (
    EncoderConfig,
    as_tensors,
    encode,
    gradient_of,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .episodes import (
    Dataset,
    Episode,
    SyntheticDomainSpec,
    generate_synthetic,
    load_directory,
    sample_episode,
)
from .protos import SspConfig, shrink_mask

log = logging.getLogger(__name__)

# Default source palette varies only in the first two channels (third fixed);
# the target categories are separable mostly along the third channel.  This
# realizes a measurable domain gap: a source-trained encoder has never needed
# the direction that distinguishes target foreground from background.
SOURCE_PALETTE = (
    (0.90, 0.15, 0.50), (0.15, 0.90, 0.50), (0.80, 0.80, 0.50), (0.30, 0.55, 0.50),
    (0.60, 0.10, 0.50), (0.10, 0.45, 0.50), (0.95, 0.60, 0.50), (0.45, 0.95, 0.50),
)
SOURCE_BACKGROUND = (0.05, 0.05, 0.50)
TARGET_PALETTE = (
    (0.50, 0.50, 0.95), (0.50, 0.50, 0.05), (0.45, 0.55, 0.75), (0.55, 0.45, 0.20),
)
TARGET_BACKGROUND = (0.50, 0.50, 0.48)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    input_size: int = 64
    out_dir: str = "runs/out"
    # encoder
    encoder_channels: tuple = (16, 32, 64)
    encoder_strides: tuple = (2, 2, 2)
    encoder_kernel: int = 3
    encoder_final_activation: bool = False
    freeze_encoder: bool = False
    # optimizer
    lr: float = 1e-3
    finetune_lr: float = 5e-4
    momentum: float = 0.9
    train_epochs: int = 20
    finetune_epochs: int = 20
    episodes_per_epoch: int = 200
    # episodes / evaluation
    shots: int = 1
    eval_episodes: int = 20      # per category
    # iterative adaptation
    iterations: int = 3
    weight_support_base: float = 0.2
    weight_query: float = 1.0
    weight_support_back: float = 0.4
    weight_iteration: float = 0.1
    # self-support matching
    fg_threshold: float = 0.7
    bg_threshold: float = 0.6
    blend: float = 0.5
    refine_passes: int = 1
    temperature: float = 10.0
    adaptive_bg: bool = False
    # augmentation
    aug_ops: tuple = ("hflip", "vflip", "rot90", "brightness", "hue")
    brightness_range: tuple = (0.7, 1.3)
    hue_degrees: float = 18.0
    aug_probability: float = 0.5
    # data ("synthetic" or a directory path)
    source_data: str = "synthetic"
    target_data: str = "synthetic"
    source_shape_family: str = "blobs"
    target_shape_family: str = "rings"
    source_categories: int = 8
    source_images: int = 40
    target_categories: int = 4
    target_images: int = 12
    source_noise: float = 0.03
    target_noise: float = 0.05

    # ---- derived views ---------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            channels=tuple(self.encoder_channels),
            strides=tuple(self.encoder_strides),
            kernel_size=self.encoder_kernel,
            final_activation=self.encoder_final_activation,
        )

    def ssp_config(self) -> SspConfig:
        return SspConfig(
            fg_threshold=self.fg_threshold,
            bg_threshold=self.bg_threshold,
            blend=self.blend,
            refine_passes=self.refine_passes,
            temperature=self.temperature,
            adaptive_bg=self.adaptive_bg,
        )

    def adapt_config(self, iterations: int | None = None) -> AdaptConfig:
        return AdaptConfig(
            iterations=self.iterations if iterations is None else iterations,
            weights=LossWeights(
                support_base=self.weight_support_base,
                query=self.weight_query,
                support_back=self.weight_support_back,
                iteration=self.weight_iteration,
            ),
            ssp=self.ssp_config(),
        )

    def aug_spec(self) -> AugSpec:
        return AugSpec(
            ops=tuple(self.aug_ops),
            brightness_range=tuple(self.brightness_range),
            hue_degrees=self.hue_degrees,
            probability=self.aug_probability,
        )

    def feature_shape(self) -> tuple:
        return self.encoder_config().output_shape(self.input_size, self.input_size)[1:]

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---- flat key = value config files --------------------------------------


def parse_kv_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    out = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        elem = default[0] if default else ""
        return tuple(_coerce(p, elem) for p in parts)
    return text


def config_from_dict(raw: dict) -> RunConfig:
    defaults = RunConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(RunConfig)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    coerced = {k: _coerce(v, known[k]) if isinstance(v, str) else v for k, v in raw.items()}
    return RunConfig(**coerced)


def load_config(path) -> RunConfig:
    return config_from_dict(parse_kv_file(path))


# ---- datasets -----------------------------------------------------------


def default_source_spec(cfg: RunConfig) -> SyntheticDomainSpec:
    return SyntheticDomainSpec(
        shape_family=cfg.source_shape_family,
        palette=SOURCE_PALETTE[: cfg.source_categories],
        background=SOURCE_BACKGROUND,
        noise_sigma=cfg.source_noise,
        categories=cfg.source_categories,
        images_per_category=cfg.source_images,
        image_size=cfg.input_size,
        category_id_start=0,
        domain_id="synthetic-source",
        seed=cfg.seed * 1000 + 1,
    )


def default_target_spec(cfg: RunConfig) -> SyntheticDomainSpec:
    return SyntheticDomainSpec(
        shape_family=cfg.target_shape_family,
        palette=TARGET_PALETTE[: cfg.target_categories],
        background=TARGET_BACKGROUND,
        noise_sigma=cfg.target_noise,
        categories=cfg.target_categories,
        images_per_category=cfg.target_images,
        image_size=cfg.input_size,
        category_id_start=100,
        domain_id="synthetic-target",
        seed=cfg.seed * 1000 + 2,
    )


def build_dataset(cfg: RunConfig, which: str) -> Dataset:
    path = cfg.source_data if which == "source" else cfg.target_data
    if path == "synthetic":
        spec = default_source_spec(cfg) if which == "source" else default_target_spec(cfg)
        return generate_synthetic(spec)
    return load_directory(path)


# ---- optimization -------------------------------------------------------


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float):
    for name, g in grads.items():
        velocity[name] = momentum * velocity[name] + g
        params[name] = params[name] - lr * velocity[name]


def _encode_masked(image, mask, params_t, enc_cfg):
    feat = encode(image, params_t, enc_cfg)
    return feat, shrink_mask(mask, feat.shape[1:])


def train_source(cfg: RunConfig, dataset: Dataset | None = None,
                 out_dir: Path | None = None) -> dict:
    """Episodic SGD over the single-pass bi-directional loss on the source domain.

    Returns the trained parameter dict; writes a checkpoint plus per-step and
    per-epoch loss series when ``out_dir`` is set.
    """
    dataset = dataset or build_dataset(cfg, "source")
    enc_cfg = cfg.encoder_config()
    params = init_params(enc_cfg, seed=cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    feat_shape = cfg.feature_shape()
    ssp = cfg.ssp_config()
    weights = cfg.adapt_config().weights

    step_losses = []
    epoch_means = []
    for epoch in range(cfg.train_epochs):
        epoch_losses = []
        for _ in range(cfg.episodes_per_epoch):
            ep = sample_episode(dataset, 1, rng, feature_shape=feat_shape)
            params_t = as_tensors(params)
            f_s, m_s = _encode_masked(*ep.support[0], params_t, enc_cfg)
            f_q, m_q = _encode_masked(ep.query_image, ep.query_mask, params_t, enc_cfg)
            loss, _ = train_step_loss(f_s, m_s, f_q, m_q, weights=weights, ssp=ssp)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at training step {len(step_losses)}")
            grads = gradient_of(loss, params_t)
            sgd_step(params, grads, velocity, cfg.lr, cfg.momentum)
            step_losses.append(loss.item())
            epoch_losses.append(loss.item())
        epoch_means.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
        log.info("train epoch %d mean loss %.4f", epoch, epoch_means[-1])

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "source.ckpt", params, enc_cfg,
                        {"stage": "train", "seed": cfg.seed, "config_digest": cfg.digest()})
        _write_series(out_dir / "train_steps.txt", step_losses)
        _write_series(out_dir / "train_epochs.txt", epoch_means)
    return params


def finetune_pair(support, aug: AugSpec, rng) -> tuple:
    """Derive one pseudo-query episode step from a support (image, mask) pair.

    The returned Episode carries no query ground truth (query_mask is None);
    the augmentation-derived supervision mask is returned separately.
    """
    image, mask = support
    q_img, q_mask, record = derive_query(image, mask, aug, rng)
    episode = Episode(support=[support], query_image=q_img, query_mask=None,
                      category_id=-1, domain_id="finetune")
    return episode, q_mask, record


def finetune_target(cfg: RunConfig, params: dict, enc_cfg: EncoderConfig,
                    dataset: Dataset | None = None, out_dir: Path | None = None,
                    iterations: int | None = None) -> dict:
    """Adapt source-trained parameters to the target supports (no query labels).

    Per epoch, every category contributes one optimization step per support:
    the chosen support spawns an augmented pseudo-query, and all K supports
    drive the T-iteration loss.  Per-step traces go to finetune_trace.jsonl.
    """
    dataset = dataset or build_dataset(cfg, "target")
    params = {k: v.copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 22]))
    feat_shape = cfg.feature_shape()
    adapt_cfg = cfg.adapt_config(iterations=iterations)
    aug = cfg.aug_spec()

    # fixed per-run support sets, drawn once per category
    support_sets = {}
    for name in sorted(dataset.categories):
        ep = sample_episode(dataset, cfg.shots, rng, feature_shape=feat_shape,
                            with_query_mask=False, category=name)
        support_sets[name] = ep.support

    trace_rows = []
    step = 0
    for epoch in range(cfg.finetune_epochs):
        for name in sorted(support_sets):
            supports = support_sets[name]
            for pick in range(len(supports)):
                episode, q_mask, _ = finetune_pair(supports[pick], aug, rng)
                assert episode.query_mask is None  # no target query labels, ever
                params_t = as_tensors(params)
                f_s_list, m_s_list = [], []
                for img, msk in supports:
                    f, m = _encode_masked(img, msk, params_t, enc_cfg)
                    f_s_list.append(f)
                    m_s_list.append(m)
                f_q = encode(episode.query_image, params_t, enc_cfg)
                m_q = shrink_mask(q_mask, f_q.shape[1:])
                if m_q.sum() == 0:
                    m_q = shrink_mask(supports[pick][1], f_q.shape[1:])
                loss, trace = adapt_step(f_s_list, m_s_list, f_q, m_q, adapt_cfg)
                if not cfg.freeze_encoder:
                    grads = gradient_of(loss, params_t)
                    sgd_step(params, grads, velocity, cfg.finetune_lr, cfg.momentum)
                row = {"step": step, "epoch": epoch, "category": name}
                row.update(trace.to_dict())
                trace_rows.append(row)
                step += 1
        log.info("finetune epoch %d done (%d steps)", epoch, step)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "target.ckpt", params, enc_cfg,
                        {"stage": "finetune", "seed": cfg.seed, "config_digest": cfg.digest()})
        with open(out_dir / "finetune_trace.jsonl", "w") as fh:
            for row in trace_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        _write_series(out_dir / "finetune_steps.txt", [r["total"] for r in trace_rows])
    return params


# ---- evaluation ---------------------------------------------------------


@dataclass
class EvalReport:
    per_category: dict       # category name -> foreground IoU
    mean_iou: float
    episode_count: int
    config_digest: str
    stage: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_category": self.per_category,
                "mean_iou": self.mean_iou,
                "episode_count": self.episode_count,
                "config_digest": self.config_digest,
                "stage": self.stage,
            },
            sort_keys=True,
            indent=2,
        )

    def to_text(self) -> str:
        lines = [f"{'category':<12} {'IoU':>8}"]
        for name in sorted(self.per_category):
            lines.append(f"{name:<12} {self.per_category[name]:>8.4f}")
        lines.append(f"{'mean':<12} {self.mean_iou:>8.4f}")
        lines.append(f"episodes: {self.episode_count}  stage: {self.stage}")
        return "\n".join(lines)


def evaluate(cfg: RunConfig, params: dict, enc_cfg: EncoderConfig,
             dataset: Dataset | None = None, stage: str = "eval",
             out_dir: Path | None = None) -> EvalReport:
    """Foreground IoU per category, accumulated over episodes, then averaged.

    Predictions are binarized at 0.5; query ground truth is compared at
    feature resolution (same downsampling as the supervision masks).
    """
    dataset = dataset or build_dataset(cfg, "target")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 33]))
    feat_shape = cfg.feature_shape()
    adapt_cfg = cfg.adapt_config()
    params_t = as_tensors(params, requires_grad=False)

    per_category = {}
    episode_count = 0
    for name in sorted(dataset.categories):
        if len(dataset.categories[name].samples) <= cfg.shots:
            log.warning("category %s too small for %d-shot eval, skipped", name, cfg.shots)
            continue
        tp = fp = fn = 0
        for _ in range(cfg.eval_episodes):
            ep = sample_episode(dataset, cfg.shots, rng, feature_shape=feat_shape,
                                category=name)
            f_s_list, m_s_list = [], []
            for img, msk in ep.support:
                f, m = _encode_masked(img, msk, params_t, enc_cfg)
                f_s_list.append(f)
                m_s_list.append(m)
            f_q = encode(ep.query_image, params_t, enc_cfg)
            pred = predict_query(f_s_list, m_s_list, f_q, adapt_cfg)
            hard = pred.fg.data >= 0.5
            truth = shrink_mask(ep.query_mask, f_q.shape[1:]) > 0.5
            tp += int(np.sum(hard & truth))
            fp += int(np.sum(hard & ~truth))
            fn += int(np.sum(~hard & truth))
            episode_count += 1
        denom = tp + fp + fn
        per_category[name] = tp / denom if denom else 0.0
    mean_iou = float(np.mean(list(per_category.values()))) if per_category else 0.0
    report = EvalReport(per_category=per_category, mean_iou=mean_iou,
                        episode_count=episode_count, config_digest=cfg.digest(),
                        stage=stage)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"eval_{stage}.json").write_text(report.to_json())
        (out_dir / f"eval_{stage}.txt").write_text(report.to_text() + "\n")
    return report


# ---- object-similarity statistics ---------------------------------------


def analyze_gestalt(dataset: Dataset, params: dict | None = None,
                    enc_cfg: EncoderConfig | None = None, pairs_per_image: int = 50,
                    seed: int = 0) -> dict:
    """Mean cosine similarity of same-object vs cross-object pixel pairs.

    Intra pairs come from one image's foreground; cross pairs match foreground
    pixels of images from different categories.  With ``params`` given, pixels
    are represented by encoder feature columns instead of raw RGB.
    """
    rng = np.random.default_rng(seed)
    feature_space = params is not None
    if feature_space:
        params_t = as_tensors(params, requires_grad=False)

    per_image = []  # (category, list of unit vectors at fg pixels)
    for name in sorted(dataset.categories):
        cat = dataset.categories[name]
        if len(cat.samples) < 2:
            log.warning("category %s has < 2 images, skipped in analysis", name)
            continue
        for s in cat.samples:
            if feature_space:
                feat = encode(s.image, params_t, enc_cfg).data
                mask = shrink_mask(s.mask, feat.shape[1:]) > 0.5
                vecs = feat[:, mask].T
            else:
                vecs = s.image[s.mask == 1]
            norms = np.linalg.norm(vecs, axis=1)
            vecs = vecs[norms > 1e-12] / norms[norms > 1e-12, None]
            if len(vecs):
                per_image.append((name, vecs))

    intra = []
    for _, vecs in per_image:
        if len(vecs) < 2:
            continue
        a = rng.integers(len(vecs), size=pairs_per_image)
        b = rng.integers(len(vecs), size=pairs_per_image)
        keep = a != b
        intra.extend(np.sum(vecs[a[keep]] * vecs[b[keep]], axis=1))

    cross = []
    cats = sorted({name for name, _ in per_image})
    by_cat = {c: [v for n, v in per_image if n == c] for c in cats}
    for i, ca in enumerate(cats):
        for cb in cats[i + 1:]:
            for _ in range(pairs_per_image):
                va = by_cat[ca][rng.integers(len(by_cat[ca]))]
                vb = by_cat[cb][rng.integers(len(by_cat[cb]))]
                cross.append(float(va[rng.integers(len(va))] @ vb[rng.integers(len(vb))]))

    return {"intra": float(np.mean(intra)) if intra else 0.0,
            "cross": float(np.mean(cross)) if cross else 0.0}


# ---- full protocol ------------------------------------------------------


def run_protocol(cfg: RunConfig, out_dir=None) -> dict:
    """train -> fine-tune -> test end to end; returns the stage reports."""
    enc_cfg = cfg.encoder_config()
    source = build_dataset(cfg, "source")
    target = build_dataset(cfg, "target")
    source_params = train_source(cfg, dataset=source, out_dir=out_dir)
    before = evaluate(cfg, source_params, enc_cfg, dataset=target,
                      stage="target_before_finetune", out_dir=out_dir)
    target_params = finetune_target(cfg, source_params, enc_cfg, dataset=target,
                                    out_dir=out_dir)
    after = evaluate(cfg, target_params, enc_cfg, dataset=target,
                     stage="target_after_finetune", out_dir=out_dir)
    in_domain = evaluate(cfg, source_params, enc_cfg, dataset=source,
                         stage="source_in_domain", out_dir=out_dir)
    return {"source_in_domain": in_domain, "target_before_finetune": before,
            "target_after_finetune": after, "params": target_params,
            "source_params": source_params}


def _write_series(path: Path, values):
    path.write_text("".join(f"{v:.8f}\n" for v in values))
