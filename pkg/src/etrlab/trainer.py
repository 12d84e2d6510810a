"""Training loop: rollouts, group advantages, clipped updates, evaluation.

A run is a deterministic function of its configuration. Rollout
randomness comes from per-(seed, step, group) streams and evaluation from
a separately tagged stream family, so evaluation cadence never perturbs
training trajectories.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractViolation, finite_diff_check
from .config import (
    TrainConfig,
    apply_overrides,
    build_strategy,
    parse_config,
    render_config,
    validate_config,
)
from .groups import RolloutGroup, group_stats
from .metrics import (
    StepMetrics,
    config_digest,
    render_lineplot,
    save_checkpoint,
    suite_labels,
    write_metrics_csv,
)
from .objectives import ClipStrategy, LossBreakdown, evaluate_prepared, prepare_batch
from .policy import PolicyParams, Vocab, init_params, sample_group
from .tasks import TaskSpec, generate_prompt, response_grammar, reward, sample_task, verify

# Stream tag separating evaluation rng from (seed, step, group) rollout
# streams; eval entropy tuples also differ in length.
_EVAL_TAG = 0x45564C31


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators for one flat parameter vector."""

    moment1: np.ndarray
    moment2: np.ndarray
    step: int = 0

    def __post_init__(self):
        if self.moment1.shape != self.moment2.shape:
            raise ContractViolation("moment vectors must share a shape")
        if self.step < 0:
            raise ContractViolation("optimizer step counter must be non-negative")

    @classmethod
    def zeros(cls, count: int) -> "OptimizerState":
        return cls(np.zeros(count), np.zeros(count), 0)


def adamw_update(
    vec: np.ndarray,
    grad: np.ndarray,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """One decoupled-weight-decay adaptive-moment step; mutates ``state``."""
    vec = np.asarray(vec, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != vec.shape or state.moment1.shape != vec.shape:
        raise ContractViolation("gradient and moments must match the parameters")
    if not lr > 0.0:
        raise ContractViolation("learning rate must be positive")
    state.step += 1
    state.moment1 *= beta1
    state.moment1 += (1.0 - beta1) * grad
    state.moment2 *= beta2
    state.moment2 += (1.0 - beta2) * grad * grad
    m_hat = state.moment1 / (1.0 - beta1**state.step)
    v_hat = state.moment2 / (1.0 - beta2**state.step)
    return vec - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * vec)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Scale the gradient so its global L2 norm is at most ``max_norm``."""
    if not max_norm > 0.0:
        raise ContractViolation("max_norm must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


class TrainingDiverged(RuntimeError):
    """Non-finite loss or parameters; carries the offending group."""

    def __init__(
        self,
        message: str,
        group_index: int | None = None,
        prompt_tokens: tuple[int, ...] | None = None,
        rewards=None,
    ):
        self.group_index = group_index
        self.prompt_tokens = prompt_tokens
        self.rewards = None if rewards is None else np.asarray(rewards)
        if group_index is not None:
            message = (
                f"{message} [group {group_index}, prompt {prompt_tokens}, "
                f"rewards {None if rewards is None else list(np.asarray(rewards))}]"
            )
        super().__init__(message)


def rollout_batch(
    params: PolicyParams,
    cfg: TrainConfig,
    vocab: Vocab,
    step: int,
) -> tuple[list[RolloutGroup], list[float], list[int]]:
    """Sample groups-per-step prompt groups for one training step.

    Returns the groups plus the per-position sampling entropies and the
    response lengths observed while rolling out.
    """
    if step < 1:
        raise ContractViolation("step index starts at 1")
    groups: list[RolloutGroup] = []
    entropies: list[float] = []
    lengths: list[int] = []
    for g in range(cfg.groups_per_step):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, step, g)))
        spec = sample_task(cfg.suite, rng)
        prompt = generate_prompt(spec, vocab, rng)
        grammar = response_grammar(prompt, vocab)
        responses, ent = sample_group(
            params,
            prompt.tokens,
            cfg.group_size,
            cfg.temperature,
            rng,
            position_masks=grammar,
            max_len=cfg.max_response_len,
            collect_entropy=True,
        )
        rewards = np.asarray([reward(verify(prompt, r.tokens, vocab)) for r in responses])
        groups.append(RolloutGroup(prompt, tuple(responses), rewards))
        entropies.extend(ent)
        lengths.extend(len(r) for r in responses)
    return groups, entropies, lengths


def _locate_nonfinite_group(prep, params: PolicyParams, batch) -> int | None:
    from .policy import score_tokens

    lp = score_tokens(params, prep.contexts, prep.targets, prep.masks, prep.temperature)
    with np.errstate(over="ignore", invalid="ignore"):
        u = np.exp(prep.ref_logprobs - lp)
        ratio = np.exp(lp - prep.old_logprobs)
    bad = ~(np.isfinite(lp) & np.isfinite(u) & np.isfinite(ratio))
    for i, (start, stop) in enumerate(prep.group_slices):
        if bad[start:stop].any():
            return i
    return None


def train_step(
    params: PolicyParams,
    ref_params: PolicyParams,
    opt: OptimizerState,
    batch: Sequence[RolloutGroup],
    cfg: TrainConfig,
    strategy: ClipStrategy | None = None,
) -> LossBreakdown:
    """Run the inner-epoch updates for one rollout batch.

    The objective is maximized, so the optimizer steps on its negation.
    Returns the breakdown evaluated at the start of the last inner epoch;
    with one inner epoch every ratio is 1 and the clip fraction is 0.
    """
    if len(batch) == 0:
        raise ContractViolation("batch must contain at least one group")
    if strategy is None:
        strategy = build_strategy(cfg)
    prep = prepare_batch(batch, strategy, ref_params, cfg.advantage_xi, cfg.temperature)
    last: LossBreakdown | None = None
    for _ in range(cfg.inner_epochs):
        # Overflow here is diagnosed explicitly below, not via warnings.
        with np.errstate(over="ignore", invalid="ignore"):
            breakdown = evaluate_prepared(prep, params, cfg.kl_coef, with_grad=True)
        if not np.isfinite(breakdown.total) or not np.all(np.isfinite(breakdown.gradient)):
            index = _locate_nonfinite_group(prep, params, batch)
            group = batch[index] if index is not None else None
            raise TrainingDiverged(
                "non-finite loss or gradient",
                group_index=index,
                prompt_tokens=None if group is None else group.prompt.tokens,
                rewards=None if group is None else group.rewards,
            )
        grad, _ = clip_grad_norm(-breakdown.gradient, cfg.grad_clip)
        vec = adamw_update(
            params.to_vector(),
            grad,
            opt,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        )
        if not np.all(np.isfinite(vec)):
            raise TrainingDiverged("non-finite parameters after update")
        params.set_vector(vec)
        last = breakdown
    return last


def evaluate(
    params: PolicyParams,
    suite: Sequence[TaskSpec],
    vocab: Vocab,
    n: int,
    n_prompts: int,
    seed: int,
    round_index: int = 0,
    temperature: float = 1.0,
) -> dict[str, tuple[float, float]]:
    """Mean@N and best@N per task label over a fixed prompt set.

    Mean@N averages correctness over all prompts and samples; best@N is
    the fraction of prompts with at least one correct sample. With n=1
    the two coincide.
    """
    if n < 1 or n_prompts < 1:
        raise ContractViolation("evaluation needs n >= 1 and n_prompts >= 1")
    out: dict[str, tuple[float, float]] = {}
    for li, spec in enumerate(suite):
        correct = 0
        hits = 0
        for pi in range(n_prompts):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, _EVAL_TAG, li, pi, round_index))
            )
            prompt = generate_prompt(spec, vocab, rng)
            grammar = response_grammar(prompt, vocab)
            responses, _ = sample_group(
                params,
                prompt.tokens,
                n,
                temperature,
                rng,
                position_masks=grammar,
                max_len=len(grammar),
            )
            ok = [verify(prompt, r.tokens, vocab) for r in responses]
            correct += sum(ok)
            hits += bool(any(ok))
        out[spec.label] = (correct / (n_prompts * n), hits / n_prompts)
    return out


@dataclass
class TrainingResult:
    config: TrainConfig
    metrics: list[StepMetrics]
    params: PolicyParams
    ref_params: PolicyParams
    opt: OptimizerState
    vocab: Vocab


def run_training(cfg: TrainConfig) -> TrainingResult:
    """Execute a full run; pure function of the configuration."""
    validate_config(cfg)
    vocab = Vocab(cfg.content_tokens)
    params = init_params(
        vocab, cfg.context_window, cfg.embed_dim, cfg.hidden_dim, cfg.seed, cfg.init_scale
    )
    ref_params = params.copy()
    strategy = build_strategy(cfg)
    opt = OptimizerState.zeros(params.param_count)
    log: list[StepMetrics] = []
    for step in range(1, cfg.steps + 1):
        batch, entropies, lengths = rollout_batch(params, cfg, vocab, step)
        breakdown = train_step(params, ref_params, opt, batch, cfg, strategy)
        evals = None
        if step % cfg.eval_every == 0 or step == cfg.steps:
            evals = evaluate(
                params,
                cfg.suite,
                vocab,
                cfg.eval_n,
                cfg.eval_prompts,
                cfg.seed,
                round_index=step,
                temperature=cfg.temperature,
            )
        log.append(
            StepMetrics(
                step=step,
                total=breakdown.total,
                surrogate=breakdown.surrogate,
                kl=breakdown.kl,
                entropy=float(np.mean(entropies)) if entropies else 0.0,
                clip_frac=breakdown.clip_fraction,
                mean_eps=breakdown.mean_epsilon,
                resp_len=float(np.mean(lengths)),
                pass_rate=float(
                    np.mean([group_stats(g.rewards, cfg.advantage_xi).pass_rate for g in batch])
                ),
                evals=evals,
            )
        )
    return TrainingResult(cfg, log, params, ref_params, opt, vocab)


def write_run_artifacts(result: TrainingResult, out_dir) -> None:
    """Emit config.txt, metrics.csv, line plots, and the final checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    (out / "config.txt").write_text(render_config(cfg), encoding="utf-8")
    labels = suite_labels(cfg.suite)
    write_metrics_csv(result.metrics, out / "metrics.csv", labels)
    log = result.metrics
    if len(log) >= 2:
        steps = [m.step for m in log]
        render_lineplot(
            [("entropy", steps, [m.entropy for m in log])],
            out / "entropy.svg",
            title="Mean token entropy",
            y_label="nats",
        )
        render_lineplot(
            [("pass_rate", steps, [m.pass_rate for m in log])],
            out / "pass_rate.svg",
            title="Batch pass rate",
            y_label="fraction",
        )
        clip_series = [("clip_frac", steps, [m.clip_frac for m in log])]
        if all(m.mean_eps is not None for m in log):
            clip_series.append(("mean_eps", steps, [m.mean_eps for m in log]))
        render_lineplot(
            clip_series,
            out / "clipping.svg",
            title="Clipping behavior",
            y_label="fraction / half-width",
        )
        eval_rows = [m for m in log if m.evals]
        if len(eval_rows) >= 2:
            render_lineplot(
                [
                    (label, [m.step for m in eval_rows], [m.evals[label][0] for m in eval_rows])
                    for label in labels
                ],
                out / "eval_mean.svg",
                title=f"Mean@{cfg.eval_n} by task",
                y_label="accuracy",
            )
    save_checkpoint(
        out / "final.ckpt",
        result.params.to_vector(),
        result.opt.moment1,
        result.opt.moment2,
        result.opt.step,
        config_digest(cfg),
    )


@dataclass(frozen=True)
class RunSummary:
    """Scalar end-of-run digest used by comparison sweeps."""

    method: str
    seed: int
    final_mean: float
    final_best: float
    final_entropy: float
    initial_entropy: float
    mean_clip_frac: float
    final_pass_rate: float

    @classmethod
    def from_result(cls, result: TrainingResult) -> "RunSummary":
        log = result.metrics
        final_evals = next(m.evals for m in reversed(log) if m.evals)
        means = [v[0] for v in final_evals.values()]
        bests = [v[1] for v in final_evals.values()]
        return cls(
            method=result.config.method,
            seed=result.config.seed,
            final_mean=float(np.mean(means)),
            final_best=float(np.mean(bests)),
            final_entropy=log[-1].entropy,
            initial_entropy=log[0].entropy,
            mean_clip_frac=float(np.mean([m.clip_frac for m in log])),
            final_pass_rate=log[-1].pass_rate,
        )


def _compare_worker(job: tuple[str, str, int, str | None]) -> RunSummary:
    cfg_text, method, seed, out_dir = job
    cfg = apply_overrides(parse_config(cfg_text), [f"method={method}", f"seed={seed}"])
    result = run_training(cfg)
    if out_dir is not None:
        write_run_artifacts(result, out_dir)
    return RunSummary.from_result(result)


def compare_runs(
    cfg: TrainConfig,
    methods: Sequence[str],
    seeds: Sequence[int],
    out_dir=None,
    jobs: int = 1,
) -> list[RunSummary]:
    """Run every (method, seed) pair; order of results is deterministic."""
    if len(methods) == 0 or len(seeds) == 0:
        raise ContractViolation("compare needs at least one method and one seed")
    cfg_text = render_config(cfg)
    job_list = []
    for method in methods:
        for seed in seeds:
            run_dir = None if out_dir is None else str(Path(out_dir) / f"{method}-seed{seed}")
            job_list.append((cfg_text, method, seed, run_dir))
    if jobs <= 1:
        return [_compare_worker(job) for job in job_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_compare_worker, job_list))


def method_medians(summaries: Sequence[RunSummary]) -> list[dict[str, float | str]]:
    """Per-method medians across seeds, in first-seen method order."""
    order: list[str] = []
    by_method: dict[str, list[RunSummary]] = {}
    for s in summaries:
        if s.method not in by_method:
            by_method[s.method] = []
            order.append(s.method)
        by_method[s.method].append(s)
    rows = []
    for method in order:
        runs = by_method[method]
        rows.append(
            {
                "method": method,
                "median_final_mean": float(np.median([r.final_mean for r in runs])),
                "median_final_best": float(np.median([r.final_best for r in runs])),
                "median_final_entropy": float(np.median([r.final_entropy for r in runs])),
                "median_mean_clip_frac": float(np.median([r.mean_clip_frac for r in runs])),
            }
        )
    return rows


GRADCHECK_VARIANTS = ("grpo", "cliphigh", "etr", "etr-micro", "etr-macro", "etr-inverse")

# Small dimensions keep the per-coordinate finite-difference sweep fast;
# parity at difficulty 1 makes mixed-reward groups likely at G=4.
_GRADCHECK_SHAPE = dict(
    groups_per_step=3,
    group_size=4,
    context_window=2,
    embed_dim=3,
    hidden_dim=5,
    max_response_len=4,
)
_GRADCHECK_SIGMA = 0.3


def gradient_check(
    method: str = "etr",
    seed: int = 0,
    fd_step: float = 1e-6,
    kink_margin: float = 1e-3,
) -> float:
    """Worst relative gradient error of the full objective for one method.

    Parameters are perturbed away from the sampling policy so ratios
    leave 1 and both clip branches are exercised; trials whose ratios sit
    within ``kink_margin`` of a clip boundary are re-drawn, since the
    objective is not differentiable there.
    """
    cfg = dataclasses.replace(
        TrainConfig(),
        method=method,
        seed=seed,
        suite=(TaskSpec("parity", 1), TaskSpec("digitsum", 1), TaskSpec("copy", 2)),
        **_GRADCHECK_SHAPE,
    )
    vocab = Vocab(cfg.content_tokens)
    strategy = build_strategy(cfg)
    for attempt in range(64):
        trial = dataclasses.replace(cfg, seed=seed + 101 * attempt)
        params = init_params(
            vocab, trial.context_window, trial.embed_dim, trial.hidden_dim, trial.seed, trial.init_scale
        )
        batch, _, _ = rollout_batch(params, trial, vocab, step=1)
        if all(float(np.std(g.rewards)) == 0.0 for g in batch):
            continue
        prep = prepare_batch(batch, strategy, params, trial.advantage_xi, trial.temperature)
        rng = np.random.default_rng(np.random.SeedSequence((trial.seed, 7777)))
        theta = params.to_vector() + rng.normal(0.0, _GRADCHECK_SIGMA, size=params.param_count)
        probe = PolicyParams.from_vector(
            vocab, trial.context_window, trial.embed_dim, trial.hidden_dim, theta
        )
        from .policy import score_tokens

        ratio = np.exp(
            score_tokens(probe, prep.contexts, prep.targets, prep.masks, prep.temperature)
            - prep.old_logprobs
        )
        margin = float(np.min(np.minimum(np.abs(ratio - prep.lo), np.abs(ratio - prep.hi))))
        below = np.any(ratio < prep.lo) or np.any(ratio > prep.hi)
        inside = np.any((ratio > prep.lo) & (ratio < prep.hi))
        if margin <= kink_margin or not below or not inside:
            continue

        def f(vec: np.ndarray) -> tuple[float, np.ndarray]:
            p = PolicyParams.from_vector(
                vocab, trial.context_window, trial.embed_dim, trial.hidden_dim, vec
            )
            bd = evaluate_prepared(prep, p, trial.kl_coef, with_grad=True)
            return bd.total, bd.gradient

        return finite_diff_check(f, theta, fd_step)
    raise ContractViolation("no kink-safe gradient-check trial found")


def gradient_check_suite(seed: int = 0, fd_step: float = 1e-6) -> list[tuple[str, float]]:
    """Run the gradient check once per strategy variant, each on its own batch."""
    return [
        (m, gradient_check(m, seed=seed + 13 * i, fd_step=fd_step))
        for i, m in enumerate(GRADCHECK_VARIANTS)
    ]
