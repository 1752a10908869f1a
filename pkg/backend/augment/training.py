"""Training loop driver, checkpoints, pool translation, experiment grid and run verification."""
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file
from torch import nn
from tqdm import tqdm

from . import persistence, registry
from .config import RunConfig, dump_config, load_config
from .contrastive import RampSchedule, hard_negative_weights, hdce_loss, src_loss
from .detection import DetectorHead, detect, detector_consistency_loss, fit_detector
from .domain import DatasetManifest, ImageSample, inherit_annotations
from .encoder import ProjectionHeads, SemanticEncoder, extract_stack, project, sample_indices
from .evaluation import DEFAULT_SUBSETS, evaluate_subsets, reference_grid
from .exceptions import CheckpointError, ConfigError, DetectorStateError, InsufficientDataError
from .generator import Translator
from .lora import adapter_state, attached_adapters, load_adapter_state
from .mixing import MixSpec, build_mixed_set
from .objectives import (Discriminator, LossReport, LossWeights, discriminator_loss, generator_adversarial_loss,
                         identity_loss, total_loss)
from .utils import jsonl
from .utils.images import load_sample, read_image, sample_tensor, to_pixels, write_image
from .utils.seeding import derive_seed, numpy_rng, torch_generator

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TRAINING_LOG = 'training_log.jsonl'
CONFIG_FILE = 'config.yaml'
CHECKPOINT_DIR = 'checkpoints'
FINAL_CHECKPOINT = 'final.safetensors'


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every tensor of the state dict, in key order."""
    digest = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        digest.update(key.encode('utf-8'))
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ==========================================
# CHECKPOINTS
# ==========================================

@dataclass(frozen=True)
class Checkpoint:
    tensors: dict
    metadata: dict

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_dict(json.loads(self.metadata['config']))

    @property
    def config_hash(self) -> str:
        return self.metadata.get('config_hash', '')

    @property
    def step(self) -> int:
        return int(self.metadata.get('step', 0))


def save_checkpoint(path: PathLike, config: RunConfig, translator: Translator, step: int,
                    heads: Optional[ProjectionHeads] = None, discriminator: Optional[Discriminator] = None) -> Path:
    path = Path(path)
    backbone = translator.backbone
    adapters = attached_adapters(backbone)
    tensors = adapter_state(adapters)
    skip_ids = {id(p) for p in backbone.skip_parameters()}
    for name, param in backbone.named_parameters():
        if id(param) in skip_ids:
            tensors[f'skip.{name}'] = param.detach().contiguous()
    if heads is not None:
        tensors.update({f'heads.{k}': v.detach().contiguous() for k, v in heads.state_dict().items()})
    if discriminator is not None:
        tensors.update({f'disc.{k}': v.detach().contiguous() for k, v in discriminator.state_dict().items()})

    metadata = {
        'config_hash': config.hash,
        'seed': str(config.seed),
        'step': str(step),
        'backbone': backbone.backbone_id,
        'lora': json.dumps({name: {'rank': a.rank, 'scale': a.scale} for name, a in adapters.items()},
                           sort_keys=True),
        'config': json.dumps(config.to_dict(), sort_keys=True),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_file({k: v.cpu() for k, v in tensors.items()}, str(path), metadata=metadata)
    except OSError as exc:
        raise CheckpointError(f'cannot write checkpoint {path}: {exc}') from exc
    logger.info('checkpoint written', extra={'path': str(path), 'step': step, 'config_hash': config.hash})
    return path


def load_checkpoint(path: PathLike, expected_hash: Optional[str] = None) -> Checkpoint:
    try:
        with safe_open(str(path), framework='pt') as f:
            metadata = dict(f.metadata() or {})
        tensors = load_file(str(path))
    except (OSError, SafetensorError) as exc:
        raise CheckpointError(f'cannot read checkpoint {path}: {exc}') from exc
    if 'config' not in metadata:
        raise CheckpointError(f'{path}: checkpoint carries no run config')
    checkpoint = Checkpoint(tensors, metadata)
    if expected_hash is not None and checkpoint.config_hash != expected_hash:
        raise CheckpointError(f'{path}: config hash {checkpoint.config_hash} does not match {expected_hash}')
    return checkpoint


def restore_translator(checkpoint: Checkpoint) -> Translator:
    """Rebuild the generator from the embedded config and load the trained factors and skip mixers."""
    translator = registry.build_translator(checkpoint.config)
    backbone = translator.backbone
    load_adapter_state(attached_adapters(backbone), checkpoint.tensors)
    skip_ids = {id(p) for p in backbone.skip_parameters()}
    with torch.no_grad():
        for name, param in backbone.named_parameters():
            if id(param) not in skip_ids:
                continue
            try:
                param.copy_(checkpoint.tensors[f'skip.{name}'])
            except KeyError as exc:
                raise CheckpointError(f'checkpoint has no skip parameter {name!r}') from exc
    return translator.eval()


# ==========================================
# TRAINING LOOP
# ==========================================

@dataclass
class TrainingComponents:
    translator: Translator
    encoder: SemanticEncoder
    contrastive_encoder: SemanticEncoder
    detector: DetectorHead
    discriminator: Discriminator


def build_components(config: RunConfig, image_size: tuple[int, int]) -> TrainingComponents:
    translator = registry.build_translator(config)
    encoder = registry.build_encoder(config.encoder)
    return TrainingComponents(
        translator=translator,
        encoder=encoder,
        contrastive_encoder=registry.build_contrastive_encoder(config.encoder, encoder, translator.backbone,
                                                               image_size),
        detector=registry.build_detector(config.detector, config.seed),
        discriminator=registry.build_discriminator(config.adversarial, encoder, config.seed),
    )


@dataclass
class TrainingResult:
    reports: list[LossReport] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _stack(samples: Sequence[ImageSample]) -> torch.Tensor:
    return torch.cat([sample_tensor(s) for s in samples], dim=0)


class Trainer:
    """
    One generator update per step:

        translate x_S -> x_hat; SRC + hDCE on shared patch indices;
        L_det on (x_hat, inherited boxes); L_idt on the night batch;
        discriminator update(s) on (x_T, x_hat.detach()); adversarial term;
        AdamW step on adapters, skip mixers and projection heads.
    """

    def __init__(self, config: RunConfig, components: TrainingComponents, day: DatasetManifest,
                 night: DatasetManifest, run_dir: Optional[PathLike] = None, progress: bool = False):
        if not len(day) or not len(night):
            raise InsufficientDataError(required=1, available=min(len(day), len(night)))
        if not components.detector.frozen:
            raise DetectorStateError('the guidance detector must be fitted and frozen before training')
        self.config = config
        self.c = components
        self.day = day.entries
        self.night = night.entries
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.progress = progress

        seed = config.seed
        self.weights = LossWeights.from_section(config.weights)
        self.ramp = RampSchedule(config.contrastive.ramp_steps)
        self.pairs = numpy_rng(seed, 'pairs')
        self.noise = torch_generator(seed, 'noise')
        self.patches = torch_generator(seed, 'patches')
        self.layers = config.encoder.layers

        probe = extract_stack(self.c.contrastive_encoder, _stack(self.day[:1]), self.layers)
        self.heads = ProjectionHeads.for_stack(probe, out_dim=config.contrastive.projection_dim,
                                               seed=derive_seed(seed, 'heads'))

        opt = config.optimizer
        self.generator_parameters = [*self.c.translator.trainable_parameters(), *self.heads.parameters()]
        self.g_optimizer = torch.optim.AdamW(self.generator_parameters, lr=opt.lr, betas=(opt.beta1, opt.beta2),
                                             weight_decay=opt.weight_decay)
        self.d_optimizer = torch.optim.AdamW(self.c.discriminator.parameters(), lr=config.adversarial.lr,
                                             betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay)
        self.step = 0
        self.result = TrainingResult()

        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            dump_config(config, self.run_dir / CONFIG_FILE)
            self.log_path.unlink(missing_ok=True)

    @property
    def log_path(self) -> Optional[Path]:
        return None if self.run_dir is None else self.run_dir / TRAINING_LOG

    def _noise(self) -> torch.Generator:
        if self.config.schedule.resample_noise:
            return self.noise
        return torch_generator(self.config.seed, 'noise')

    def _contrastive(self, x_S: torch.Tensor, x_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        encoder = self.c.contrastive_encoder
        if encoder.requires_frozen:
            with torch.no_grad():
                stack_S = extract_stack(encoder, x_S, self.layers)
        else:
            stack_S = extract_stack(encoder, x_S, self.layers)
        stack_T = extract_stack(encoder, x_hat, self.layers)
        indices = sample_indices(stack_S, self.config.contrastive.num_patches, generator=self.patches)
        f_S = project(stack_S, indices, self.heads)
        f_T = project(stack_T, indices, self.heads)
        W = [hard_negative_weights(f.detach(), self.config.contrastive.gamma) for f in f_S]
        return src_loss(f_S, f_T), hdce_loss(f_T, f_S, W, tau=self.config.contrastive.tau)

    def _update_discriminator(self, x_T: torch.Tensor, x_hat: torch.Tensor) -> None:
        D = self.c.discriminator
        for _ in range(self.config.adversarial.updates_per_step):
            loss = discriminator_loss(D, x_T, x_hat.detach())
            self.d_optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.d_optimizer.step()

    def train_step(self) -> LossReport:
        started = time.perf_counter()
        batch = self.config.training.batch_size
        day = [self.day[i] for i in self.pairs.integers(len(self.day), size=batch)]
        night = [self.night[i] for i in self.pairs.integers(len(self.night), size=batch)]
        x_S, x_T = _stack(day), _stack(night)
        generator = self._noise()

        translator = self.c.translator.train()
        x_hat = translator(x_S, generator=generator)
        src, hdce = self._contrastive(x_S, x_hat)
        det = detector_consistency_loss(self.c.detector, x_hat, [s.annotations for s in day], self.config.weights)
        idt = identity_loss(lambda x: translator(x, generator=generator), x_T)
        self._update_discriminator(x_T, x_hat)
        adv = generator_adversarial_loss(self.c.discriminator, x_hat,
                                         non_saturating=self.config.adversarial.non_saturating)

        total, report = total_loss({'src': src, 'hdce': hdce, 'det': det, 'idt': idt, 'adv': adv},
                                   self.weights, self.step, self.ramp)
        self.g_optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.g_optimizer.step()

        wall_time = time.perf_counter() - started
        if self.config.logging.record_wall_time:
            report = replace(report, wall_time=wall_time)
        if self.log_path is not None:
            persistence.append_loss_report(report, self.log_path)
        logger.debug('training step', extra={'step': self.step, 'total': report.total, 'wall_time': wall_time})
        self.result.reports.append(report)
        self.step += 1
        return report

    def checkpoint(self, name: str) -> Optional[Path]:
        if self.run_dir is None:
            return None
        path = save_checkpoint(self.run_dir / CHECKPOINT_DIR / name, self.config, self.c.translator, self.step,
                               heads=self.heads, discriminator=self.c.discriminator)
        self.result.checkpoints.append(path)
        return path

    def run(self, steps: Optional[int] = None) -> TrainingResult:
        steps = self.config.training.total_steps if steps is None else steps
        every = self.config.training.checkpoint_every
        started = time.perf_counter()
        for _ in tqdm(range(steps), desc='training', disable=not self.progress):
            self.train_step()
            if every and self.step % every == 0:
                self.checkpoint(f'step_{self.step:06d}.safetensors')
                logger.info('training progress', extra={'step': self.step,
                                                        'wall_time': time.perf_counter() - started})
        self.checkpoint(FINAL_CHECKPOINT)
        if self.log_path is not None and self.log_path.exists():
            persistence.write_meta(self.log_path, 'training_log', self.config.hash, len(self.result.reports))
        logger.info('training finished', extra={'steps': self.step, 'config_hash': self.config.hash,
                                                'wall_time': time.perf_counter() - started})
        return self.result


def fit_guidance_detector(config: RunConfig, detector: DetectorHead, day: DatasetManifest,
                          progress: bool = False) -> DetectorHead:
    return fit_detector(detector, day.entries, config.weights, stages=config.detector.fit_steps,
                        lr=config.detector.fit_lr, seed=derive_seed(config.seed, 'guidance'), progress=progress)


def train(config: RunConfig, day: DatasetManifest, night: DatasetManifest,
          components: Optional[TrainingComponents] = None, run_dir: Optional[PathLike] = None,
          steps: Optional[int] = None, progress: bool = False) -> TrainingResult:
    """Build (or take) the components, fit the guidance detector if needed and run the loop."""
    if not len(day):
        raise InsufficientDataError(required=1, available=0)
    if components is None:
        first = day[0]
        components = build_components(config, (first.height, first.width))
    if not components.detector.frozen:
        fit_guidance_detector(config, components.detector, day, progress=progress)
    return Trainer(config, components, day, night, run_dir=run_dir, progress=progress).run(steps)


# ==========================================
# POOL TRANSLATION
# ==========================================

def translate_pool(translator: Translator, day: DatasetManifest, out_dir: PathLike, root: Optional[PathLike] = None,
                   seed: int = 0, config_hash: Optional[str] = None, workers: int = 1,
                   progress: bool = False) -> DatasetManifest:
    """
    Translate every day entry once into out_dir/images and write out_dir/manifest.jsonl.

    Images already on disk are reused, so an interrupted run can be
    restarted. Each image draws its noise from a stream keyed by its id.
    """
    out_dir = Path(out_dir)
    translator.eval()

    def one(entry: ImageSample) -> ImageSample:
        image_id = f'{entry.image_id}__night'
        relative = f'images/{image_id}.png'
        target = out_dir / relative
        if target.exists():
            pixels = read_image(target)
        else:
            sample = load_sample(entry, root)
            with torch.no_grad():
                out = translator(sample_tensor(sample), generator=torch_generator(seed, 'translate', entry.image_id))
            pixels = to_pixels(out)
            write_image(pixels, target)
        height, width = pixels.shape[:2]
        scale = None
        if (width, height) != (entry.width, entry.height):
            scale = (width / entry.width, height / entry.height)
        synthetic = inherit_annotations(entry, pixels, image_id=image_id, scale=scale, image_path=relative)
        return replace(synthetic, pixels=None)

    entries = day.entries
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            translated = list(tqdm(pool.map(one, entries), total=len(entries), desc='translate', disable=not progress))
    else:
        translated = [one(e) for e in tqdm(entries, desc='translate', disable=not progress)]

    manifest = DatasetManifest(translated)
    persistence.write_manifest(manifest, out_dir / 'manifest.jsonl', config_hash=config_hash)
    return manifest


# ==========================================
# EXPERIMENT GRID
# ==========================================

PENDING = 'pending'
DONE = 'done'


@dataclass(frozen=True)
class GridRow:
    label: str
    ratio: Optional[float]
    train_size: int
    status: str
    lamr: dict = field(default_factory=dict)


def ratio_label(ratio: float) -> str:
    return f'mix_{int(round(ratio * 100)):03d}'


def _score(detections, val_night: DatasetManifest, subsets: Sequence[str], iou_threshold: float, fppi_grid) -> dict:
    gts = {s.image_id: s.annotations for s in val_night}
    curves = {c.subset: c.lamr for c in evaluate_subsets(detections, gts, subsets, iou_threshold, fppi_grid)}
    return {name: curves.get(name) for name in subsets}


def run_experiment_grid(
    config: RunConfig,
    ratios: Sequence[float],
    synthetic: DatasetManifest,
    real_night: DatasetManifest,
    val_night: DatasetManifest,
    day: Optional[DatasetManifest] = None,
    include_target: bool = False,
    out_dir: Optional[PathLike] = None,
    external: bool = False,
    progress: bool = False,
) -> list[GridRow]:
    """
    One row per injection ratio (ascending), optionally framed by a day-only
    baseline row and a real-night target row.

    The toy path fits a fresh toy detector per row and scores it on
    ``val_night``. With ``external`` each row's training manifest is written
    to ``out_dir`` and the row stays pending until ``<label>.detections.jsonl``
    appears next to it.
    """
    ratios = list(ratios)
    if len(set(ratios)) != len(ratios):
        raise ConfigError(f'duplicate injection ratios in {ratios}')
    if external and out_dir is None:
        raise ConfigError('the external grid path needs an output directory')
    unknown = [name for name in config.evaluation.subsets if name not in DEFAULT_SUBSETS]
    if unknown:
        raise ConfigError(f'unknown evaluation subsets {unknown}')
    ev = config.evaluation
    subsets = list(ev.subsets)
    fppi_grid = reference_grid(ev.fppi_min, ev.fppi_max, ev.fppi_points)
    out_dir = Path(out_dir) if out_dir is not None else None

    plan: list[tuple[str, Optional[float], DatasetManifest]] = []
    if day is not None:
        plan.append(('baseline_day', None, day))
    for ratio in sorted(ratios):
        mixed = build_mixed_set(MixSpec(synthetic, real_night, ratio, seed=config.mixing.seed))
        plan.append((ratio_label(ratio), ratio, mixed))
    if include_target:
        plan.append(('target', None, real_night))

    rows = []
    for label, ratio, train_set in plan:
        if external:
            persistence.write_manifest(train_set, out_dir / f'{label}.manifest.jsonl', config_hash=config.hash)
            dump = out_dir / f'{label}.detections.jsonl'
            if not dump.exists():
                rows.append(GridRow(label, ratio, len(train_set), PENDING))
                continue
            detections = persistence.read_detections(dump)
        else:
            detector = registry.build_detector(replace(config.detector, checkpoint=None), derive_seed(config.seed, 'grid'))
            fit_detector(detector, train_set.entries, config.weights, stages=config.detector.fit_steps,
                         lr=config.detector.fit_lr, seed=derive_seed(config.seed, 'grid', label), progress=progress)
            detections = detect(detector, val_night.entries, score_threshold=config.detector.score_threshold)
            if out_dir is not None:
                persistence.write_detections(detections, out_dir / f'{label}.detections.jsonl',
                                             config_hash=config.hash)
        row = GridRow(label, ratio, len(train_set), DONE,
                      _score(detections, val_night, subsets, ev.iou_threshold, fppi_grid))
        logger.info('grid row scored', extra={'label': label, 'ratio': ratio, 'train_size': len(train_set),
                                              'lamr': row.lamr})
        rows.append(row)

    if out_dir is not None:
        write_grid_report(rows, out_dir / 'grid_report.json', config.hash)
    return rows


def write_grid_report(rows: Sequence[GridRow], path: PathLike, config_hash: Optional[str]) -> dict:
    """LAMR values in percent, rounded like the evaluation report."""
    payload = {
        'header': {'config_hash': config_hash},
        'rows': [
            {
                'label': row.label,
                'lamr': {k: (None if v is None else round(100.0 * v, 6)) for k, v in row.lamr.items()},
                'ratio': row.ratio,
                'status': row.status,
                'train_size': row.train_size,
            }
            for row in rows
        ],
    }
    jsonl.write_json(path, payload)
    return payload


# ==========================================
# RUN VERIFICATION
# ==========================================

@dataclass(frozen=True)
class RunVerification:
    expected: Optional[str]
    artifacts: dict
    mismatches: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def _artifact_hashes(run_dir: Path) -> dict:
    found = {}
    for path in sorted(run_dir.rglob('*')):
        if not path.is_file():
            continue
        if path.name.endswith('.meta.json'):
            found[str(path.relative_to(run_dir))] = jsonl.read_json(path).get('config_hash')
        elif path.suffix == '.safetensors':
            try:
                with safe_open(str(path), framework='pt') as f:
                    metadata = f.metadata() or {}
            except (OSError, SafetensorError):
                found[str(path.relative_to(run_dir))] = None
                continue
            if 'config_hash' in metadata:
                found[str(path.relative_to(run_dir))] = metadata['config_hash'] or None
        elif path.suffix == '.json':
            try:
                header = jsonl.read_json(path).get('header')
            except ValueError:
                continue
            if isinstance(header, dict) and 'config_hash' in header:
                found[str(path.relative_to(run_dir))] = header['config_hash']
    return found


def verify_run(run_dir: PathLike) -> RunVerification:
    """Check that every artifact under run_dir embeds the same config hash as run_dir/config.yaml."""
    run_dir = Path(run_dir)
    artifacts = _artifact_hashes(run_dir)
    config_file = run_dir / CONFIG_FILE
    if config_file.exists():
        expected = load_config(config_file).hash
    else:
        expected = next((h for h in artifacts.values() if h), None)
    mismatches = tuple(sorted(name for name, value in artifacts.items() if value != expected))
    if mismatches:
        logger.warning('config hash mismatch', extra={'run_dir': str(run_dir), 'artifacts': list(mismatches)})
    return RunVerification(expected, artifacts, mismatches)
