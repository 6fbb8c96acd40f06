"""Two-stage collaborative training.

Stage A trains the class-agnostic detector on base annotations with
box-wise feature distillation. Stage B adds per-schedule novel-object
discovery and the class-specific contrastive alignment driven by the
growing label pool. Every random draw is keyed by (seed, purpose, epoch,
scene index), so runs are bit-reproducible and stage-B branches replayed
from a stage-A snapshot match an uninterrupted run exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace, asdict
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .alignment import build_alignment_batch, contrastive_loss, distill_loss
from .detector import (
    DetectorConfig,
    DetectorParams,
    apply_update,
    detection_pred_grads,
    forward,
    save_checkpoint,
)
from .discovery import (
    SOURCE_BASE,
    DiscoveryConfig,
    DiscoveryReport,
    LabelPool,
    run_discovery_epoch,
)
from .encoders import EncoderConfig, TextEmbeddings, Vocabulary, encode_text
from .errors import ConfigError
from .evaluation import EvalResult, classify_predictions, evaluate
from .matching import match
from .world import Scene, WorldConfig, build_vocabulary, generate_dataset

METRICS_HEADER = "epoch,AP_Novel,AP_Base,AP_Mean,AR_Novel,AR_Base,AR_Mean,pool_size"
EVAL_WORLD_SEED_OFFSET = 7919

TABLE1_ROWS = (
    "distill-crop-eval",
    "distill",
    "discovery-distill",
    "discovery-distill-plain-align",
    "full",
)
TABLE3_GRID = ((0.3, 0.3), (0.3, 0.5), (0.5, 0.3), (0.5, 0.5))


@dataclass(frozen=True)
class TrainConfig:
    world: WorldConfig = WorldConfig()
    encoder: EncoderConfig = EncoderConfig()
    discovery: DiscoveryConfig = DiscoveryConfig()
    detector: DetectorConfig = DetectorConfig()
    stage_a_epochs: int = 60
    stage_b_epochs: int = 40
    learning_rate: float = 2e-3
    momentum: float = 0.9
    lambda_distill: float = 1.0
    lambda_contrastive: float = 1.0
    k_extra_queries: int = 32
    extra_selection: str = "objectness"
    eval_every: int = 10
    num_eval_scenes: int = 50
    seed: int = 0
    discovery_enabled: bool = True
    contrastive_enabled: bool = True
    plain_alignment: bool = False
    eval_feature_source: str = "3d"

    def __post_init__(self):
        if self.stage_a_epochs < 0 or self.stage_b_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.stage_a_epochs + self.stage_b_epochs < 1:
            raise ConfigError("need at least one training epoch")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        for stage in (self.stage_a_epochs, self.stage_b_epochs):
            if stage % self.eval_every != 0:
                raise ConfigError("eval_every must divide both stage lengths")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.eval_feature_source not in ("3d", "2d"):
            raise ConfigError("eval_feature_source must be '3d' or '2d'")
        if self.detector.feature_dim != self.encoder.embedding_dim:
            raise ConfigError(
                "detector.feature_dim must equal encoder.embedding_dim "
                f"({self.detector.feature_dim} != {self.encoder.embedding_dim})"
            )

    @property
    def total_epochs(self) -> int:
        return self.stage_a_epochs + self.stage_b_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = self.world.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        kwargs["world"] = WorldConfig.from_dict(kwargs["world"])
        kwargs["encoder"] = EncoderConfig(**kwargs["encoder"])
        kwargs["discovery"] = DiscoveryConfig(**kwargs["discovery"])
        kwargs["detector"] = DetectorConfig(**kwargs["detector"])
        return cls(**kwargs)


@dataclass
class TrainContext:
    train_scenes: list[Scene]
    eval_scenes: list[Scene]
    vocab: Vocabulary
    text: TextEmbeddings


@dataclass
class MetricsRow:
    epoch: int
    result: EvalResult
    pool_size: int

    def csv_line(self) -> str:
        values = ",".join(f"{100.0 * v:.6f}" for v in self.result.csv_row())
        return f"{self.epoch},{values},{self.pool_size}"


@dataclass
class TrainState:
    params: DetectorParams
    velocity: dict | None
    pool: LabelPool
    epoch: int = 0
    metrics: list[MetricsRow] = field(default_factory=list)
    reports: list[DiscoveryReport] = field(default_factory=list)

    def branch(self) -> "TrainState":
        return TrainState(
            params=self.params.copy(),
            velocity=None if self.velocity is None else {
                k: v.copy() for k, v in self.velocity.items()
            },
            pool=self.pool,  # immutable-by-convention; updates replace it
            epoch=self.epoch,
            metrics=list(self.metrics),
            reports=list(self.reports),
        )


@dataclass
class RunArtifacts:
    config: TrainConfig
    params: DetectorParams
    pool: LabelPool
    metrics: list[MetricsRow]
    reports: list[DiscoveryReport]

    @property
    def final_result(self) -> EvalResult:
        return self.metrics[-1].result


def prepare_context(
    config: TrainConfig,
    train_scenes: list[Scene] | None = None,
    vocab: Vocabulary | None = None,
) -> TrainContext:
    """Build (or adopt) the training world and derive the held-out eval
    split and text embeddings."""
    if vocab is None:
        vocab = build_vocabulary(config.world)
    if train_scenes is None:
        train_scenes = generate_dataset(config.world, vocab)
    eval_world = replace(
        config.world,
        seed=config.world.seed + EVAL_WORLD_SEED_OFFSET,
        num_scenes=config.num_eval_scenes,
    )
    eval_scenes = generate_dataset(eval_world, vocab, scene_id_prefix="eval")
    text = encode_text(vocab, config.encoder)
    return TrainContext(
        train_scenes=train_scenes, eval_scenes=eval_scenes, vocab=vocab, text=text
    )


def _train_epoch(config, ctx, state: TrainState, stage_b: bool) -> None:
    params, velocity = state.params, state.velocity
    for index, scene in enumerate(ctx.train_scenes):
        rng = np.random.default_rng([config.seed, 0xA11, state.epoch, index])
        output = forward(scene, params)
        labels = state.pool.entries(scene.scene_id)
        assignment = match(output.predictions, labels)
        _, pred_grads = detection_pred_grads(output, labels, assignment)
        batch = build_alignment_batch(
            scene, output, state.pool, assignment, ctx.text, config.encoder,
            rng, config.k_extra_queries, config.extra_selection,
        )
        _, d_feat = distill_loss(batch)
        d_feat = config.lambda_distill * d_feat
        if stage_b and config.contrastive_enabled:
            if config.plain_alignment:
                _, d_contra = contrastive_loss(
                    batch, ctx.text,
                    temperature=config.encoder.temperature,
                    normalize=config.encoder.normalize_features,
                    category_subset=ctx.vocab.seen_ids(),
                    allowed_sources=(SOURCE_BASE,),
                )
            else:
                _, d_contra = contrastive_loss(
                    batch, ctx.text,
                    temperature=config.encoder.temperature,
                    normalize=config.encoder.normalize_features,
                )
            d_feat += config.lambda_contrastive * d_contra
        grads = output.backprop(d_feature=d_feat, **pred_grads)
        params, velocity = apply_update(
            params, grads, config.learning_rate, config.momentum, velocity
        )
    state.params, state.velocity = params, velocity


def evaluate_model(config: TrainConfig, ctx: TrainContext, params: DetectorParams) -> EvalResult:
    """Detect, classify, and score the held-out split against full ground
    truth (base and novel objects)."""
    detections = []
    truth = {}
    for index, scene in enumerate(ctx.eval_scenes):
        output = forward(scene, params)
        rng = None
        if config.eval_feature_source == "2d":
            rng = np.random.default_rng([config.seed, 0xE7A1, index])
        detections.extend(
            classify_predictions(
                output, scene, ctx.text, config.encoder,
                feature_source=config.eval_feature_source, rng=rng,
            )
        )
        truth[scene.scene_id] = list(scene.objects)
    return evaluate(detections, truth, ctx.vocab, iou_threshold=0.25)


class RunWriter:
    """Incremental run-directory writer: config snapshot first, metrics CSV
    appended one complete line at a time, pool snapshots at each update."""

    def __init__(self, run_dir, config: TrainConfig, vocab: Vocabulary):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.vocab = vocab
        (self.dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
        self.metrics_path = self.dir / "metrics.csv"
        self.metrics_path.write_text(METRICS_HEADER + "\n")

    def append_metrics(self, row: MetricsRow) -> None:
        with open(self.metrics_path, "a") as fh:
            fh.write(row.csv_line() + "\n")
            fh.flush()

    def write_pool_snapshot(self, pool: LabelPool, epoch: int) -> None:
        pool.save(self.dir / f"pool_epoch_{epoch:04d}.json", self.vocab)

    def finalize(self, artifacts: RunArtifacts) -> None:
        artifacts.pool.save(self.dir / "pool.json", self.vocab)
        save_checkpoint(
            artifacts.params,
            self.dir / "checkpoint.ckpt",
            step=artifacts.config.total_epochs,
        )


def _advance(
    config: TrainConfig,
    ctx: TrainContext,
    state: TrainState,
    n_epochs: int,
    stage_b: bool,
    writer: RunWriter | None = None,
    stage_b_start: int | None = None,
) -> None:
    """Run n epochs from the current state, with discovery/eval on schedule."""
    for _ in range(n_epochs):
        epoch = state.epoch
        if stage_b and config.discovery_enabled:
            offset = epoch - (stage_b_start if stage_b_start is not None else 0)
            if offset % config.discovery.update_period_epochs == 0:
                state.pool, report = run_discovery_epoch(
                    ctx.train_scenes, state.params, state.pool, ctx.vocab, ctx.text,
                    config.discovery, config.encoder, epoch=epoch, seed=config.seed,
                )
                state.reports.append(report)
                if writer is not None:
                    writer.write_pool_snapshot(state.pool, epoch)
        _train_epoch(config, ctx, state, stage_b)
        state.epoch += 1
        if state.epoch % config.eval_every == 0:
            row = MetricsRow(
                epoch=state.epoch,
                result=evaluate_model(config, ctx, state.params),
                pool_size=state.pool.novel_size(),
            )
            state.metrics.append(row)
            if writer is not None:
                writer.append_metrics(row)


def train(
    config: TrainConfig,
    ctx: TrainContext | None = None,
    run_dir=None,
) -> RunArtifacts:
    """Full two-stage run. Deterministic given the config seed."""
    if ctx is None:
        ctx = prepare_context(config)
    writer = RunWriter(run_dir, config, ctx.vocab) if run_dir is not None else None
    state = TrainState(
        params=DetectorParams.initialize(config.detector, config.seed),
        velocity=None,
        pool=LabelPool.from_scenes(ctx.train_scenes),
    )
    _advance(config, ctx, state, config.stage_a_epochs, stage_b=False, writer=writer)
    _advance(
        config, ctx, state, config.stage_b_epochs, stage_b=True, writer=writer,
        stage_b_start=config.stage_a_epochs,
    )
    artifacts = RunArtifacts(
        config=config, params=state.params, pool=state.pool,
        metrics=state.metrics, reports=state.reports,
    )
    if writer is not None:
        writer.finalize(artifacts)
    return artifacts


# ---------------------------------------------------------------------------
# ablation suite


@dataclass
class AblationRow:
    name: str
    seed: int
    thresholds: tuple[float, float] | None
    result: EvalResult
    pool_size: int

    def csv_line(self) -> str:
        values = ",".join(f"{100.0 * v:.6f}" for v in self.result.csv_row())
        s, g = self.thresholds if self.thresholds else ("", "")
        return f"{self.name},{self.seed},{s},{g},{values},{self.pool_size}"


ABLATION_HEADER = (
    "name,seed,semantic_threshold,geometry_threshold,"
    "AP_Novel,AP_Base,AP_Mean,AR_Novel,AR_Base,AR_Mean,pool_size"
)


def _stage_b_variant(config: TrainConfig, name: str,
                     thresholds: tuple[float, float] | None = None) -> TrainConfig:
    if name == "baseline":  # distillation only, for the same total epochs
        return replace(config, discovery_enabled=False, contrastive_enabled=False)
    if name == "discovery-distill":
        return replace(config, discovery_enabled=True, contrastive_enabled=False)
    if name == "discovery-distill-plain-align":
        return replace(config, discovery_enabled=True, contrastive_enabled=True,
                       plain_alignment=True)
    if name == "full":
        cfg = replace(config, discovery_enabled=True, contrastive_enabled=True,
                      plain_alignment=False)
        if thresholds is not None:
            cfg = replace(cfg, discovery=replace(
                config.discovery,
                semantic_threshold=thresholds[0],
                objectness_threshold=thresholds[1],
            ))
        return cfg
    raise ValueError(f"unknown stage-b variant {name!r}")


def _run_branch(args):
    variant_config, ctx, state_blob = args
    state = state_blob.branch()
    _advance(
        variant_config, ctx, state, variant_config.stage_b_epochs, stage_b=True,
        stage_b_start=variant_config.stage_a_epochs,
    )
    final = state.metrics[-1] if state.metrics else MetricsRow(
        epoch=state.epoch,
        result=evaluate_model(variant_config, ctx, state.params),
        pool_size=state.pool.novel_size(),
    )
    return RunArtifacts(
        config=variant_config, params=state.params, pool=state.pool,
        metrics=state.metrics, reports=state.reports,
    ), final


def run_ablation_suite(
    config: TrainConfig,
    ctx: TrainContext | None = None,
    jobs: int = 1,
) -> dict[str, list[AblationRow]]:
    """The two ablation tables.

    Table 1: frozen-encoder eval of the distillation model, distillation,
    discovery+distillation, discovery+distillation with plain (base-only)
    alignment, and the full model. Table 2 ("table3" key, mirroring the
    threshold study): the {0.3, 0.5}^2 semantic/geometry threshold grid
    plus the gates-disabled run.

    Stage A is trained once and every row branches from that snapshot,
    exactly like continuing a shared pretrained base model. All rows use
    equal total epochs.
    """
    if ctx is None:
        ctx = prepare_context(config)
    base_state = TrainState(
        params=DetectorParams.initialize(config.detector, config.seed),
        velocity=None,
        pool=LabelPool.from_scenes(ctx.train_scenes),
    )
    stage_a_config = replace(config, discovery_enabled=False, contrastive_enabled=False)
    _advance(stage_a_config, ctx, base_state, config.stage_a_epochs, stage_b=False)

    branch_specs: list[tuple[str, TrainConfig]] = [
        ("baseline", _stage_b_variant(config, "baseline")),
        ("discovery-distill", _stage_b_variant(config, "discovery-distill")),
        ("discovery-distill-plain-align",
         _stage_b_variant(config, "discovery-distill-plain-align")),
    ]
    grid_names = {}
    for thresholds in TABLE3_GRID:
        name = f"grid-s{thresholds[0]}-g{thresholds[1]}"
        grid_names[thresholds] = name
        branch_specs.append((name, _stage_b_variant(config, "full", thresholds)))
    default_thresholds = (
        config.discovery.semantic_threshold, config.discovery.objectness_threshold
    )
    if default_thresholds in grid_names:
        full_source = grid_names[default_thresholds]
    else:
        full_source = "full"
        branch_specs.append(("full", _stage_b_variant(config, "full")))

    work = [(cfg, ctx, base_state) for _, cfg in branch_specs]
    if jobs > 1:
        with get_context("fork").Pool(jobs) as pool:
            outcomes = pool.map(_run_branch, work)
    else:
        outcomes = [_run_branch(w) for w in work]
    by_name = {name: outcome for (name, _), outcome in zip(branch_specs, outcomes)}

    def row(name, source, thresholds=None, eval_2d=False):
        artifacts, final = by_name[source]
        result = final.result
        if eval_2d:
            cfg_2d = replace(artifacts.config, eval_feature_source="2d")
            result = evaluate_model(cfg_2d, ctx, artifacts.params)
        return AblationRow(
            name=name, seed=config.seed, thresholds=thresholds,
            result=result, pool_size=final.pool_size,
        )

    table1 = [
        row("distill-crop-eval", "baseline", eval_2d=True),
        row("distill", "baseline"),
        row("discovery-distill", "discovery-distill"),
        row("discovery-distill-plain-align", "discovery-distill-plain-align"),
        row("full", full_source),
    ]
    table3 = [
        row("gates-disabled", "baseline", thresholds=None),
    ] + [
        row(grid_names[t], grid_names[t], thresholds=t) for t in TABLE3_GRID
    ]
    return {"table1": table1, "table3": table3, "runs": by_name}
