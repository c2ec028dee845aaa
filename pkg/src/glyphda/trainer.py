"""The alternating four-phase training loop, schedules, checkpoints and ``fit``.

Per iteration:
  1. discriminators: feature discriminator, then both image discriminators,
     against detached encoder/generator outputs;
  2. generator: a2 * image-adversarial + a3 * perceptual + a4 * reconstruction;
  3. encoders: texture encoders on the same three terms; the structure encoder
     additionally on a1 * feature-adversarial and both classification terms;
  4. classifier: source + transformed-image classification.
Each phase runs its own forward pass against the parameters as updated so far.
A term whose ablation flag is off or whose weight is zero is skipped entirely,
so networks serving only that term are never touched.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import losses as L
from .checkpoint import read_container, write_container
from .config import GROUPS, ExperimentConfig, OptimizerSpec, ScheduleSpec, dump_config, loads_config
from .data import Corpora, Domain, ImageBatch, batch_stream, load_corpora
from .evaluation import evaluate, save_grid
from .latent import assemble, transform_quadruple
from .networks import NETWORK_NAMES, Networks, build_networks

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration",) + L.TERMS + ("total", "lr_backbone", "lr_discriminators", "lr_generator", "wall_clock")


def lr_at(spec: ScheduleSpec, iteration: int) -> float:
    """Polynomial decay: base_rate * (1 - iteration / total_iterations) ** exponent."""
    if not 0 <= iteration <= spec.total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {spec.total_iterations}]")
    return spec.base_rate * (1.0 - iteration / spec.total_iterations) ** spec.exponent


def make_optimizer(spec: OptimizerSpec, params) -> torch.optim.Optimizer:
    if spec.kind == "sgd":
        return torch.optim.SGD(params, lr=spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay)
    return torch.optim.Adam(params, lr=spec.lr, betas=tuple(spec.betas), weight_decay=spec.weight_decay)


@dataclass
class TrainState:
    cfg: ExperimentConfig
    nets: Networks
    optimizers: dict[str, torch.optim.Optimizer]
    iteration: int = 0
    stream_state: Optional[dict] = None
    best_target_accuracy: float = -1.0

    @property
    def t_max(self) -> int:
        return self.cfg.trainer.t_max


def init_state(cfg: ExperimentConfig, nets: Optional[Networks] = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    nets = nets if nets is not None else build_networks(cfg)
    nets.train()
    optimizers = {
        name: make_optimizer(getattr(cfg.optim, GROUPS[name]), nets.parameters_of(name)) for name in NETWORK_NAMES
    }
    return TrainState(cfg, nets, optimizers)


@dataclass(frozen=True)
class ActiveTerms:
    advF: bool
    advI: bool
    per: bool
    rec: bool
    cls_st: bool

    @property
    def generator(self) -> bool:
        """Whether the generator receives an update."""
        return self.advI or self.per or self.rec

    @property
    def needs_images(self) -> bool:
        return self.generator or self.cls_st


def active_terms(cfg: ExperimentConfig) -> ActiveTerms:
    f, a = cfg.ablation, cfg.loss
    return ActiveTerms(
        advF=f.use_advF and a.alpha1 > 0,
        advI=f.use_advI and a.alpha2 > 0,
        per=f.use_per and a.alpha3 > 0,
        rec=f.use_rec and a.alpha4 > 0,
        cls_st=f.use_cls_st,
    )


def _checked(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise L.NonFiniteLossError(name, float(value.detach()))
    return value


def _apply(opt: torch.optim.Optimizer, params: list, grads) -> None:
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    opt.step()
    for p in params:
        p.grad = None


def _step(opt: torch.optim.Optimizer, params: list, loss: torch.Tensor) -> None:
    _apply(opt, params, torch.autograd.grad(loss, params, allow_unused=True))


class _RealTaps:
    """Perceptual features of the real inputs; fixed within an iteration."""

    def __init__(self, nets: Networks, cfg: ExperimentConfig, x_s: torch.Tensor, x_t: torch.Tensor):
        self.names = cfg.perceptual.tap_names()
        with torch.no_grad():
            both = nets.perceptual(torch.cat([x_s, x_t]), self.names)
        self.s = {k: v[: len(x_s)] for k, v in both.items()}
        self.t = {k: v[len(x_s):] for k, v in both.items()}


def _generation_terms(nets: Networks, cfg: ExperimentConfig, act: ActiveTerms, quad, real: Optional[_RealTaps]) -> dict:
    terms = {}
    if act.advI:
        terms["advI_g"] = _checked("advI_g", L.advI_generator(nets.image_disc_t, quad.x_st)
                                   + L.advI_generator(nets.image_disc_s, quad.x_ts))
    if act.per or act.rec:
        gen = nets.perceptual(torch.cat([quad.x_ss, quad.x_tt, quad.x_st, quad.x_ts]), real.names)
        ss, tt, st, ts = ({k: v.chunk(4)[i] for k, v in gen.items()} for i in range(4))
        if act.per:
            structure, texture = L.perceptual_terms(cfg.perceptual, real.s, real.t, st, ts)
            terms["per"] = _checked("per", structure + texture)
        if act.rec:
            terms["rec"] = _checked("rec", L.reconstruction_term(cfg.perceptual, real.s, real.t, ss, tt))
    return terms


def _generation_objective(cfg: ExperimentConfig, terms: dict):
    a = cfg.loss
    weights = {"advI_g": a.alpha2, "per": a.alpha3, "rec": a.alpha4}
    return sum(weights[k] * v for k, v in terms.items() if k in weights)


def set_learning_rates(state: TrainState) -> dict[str, float]:
    schedules = state.cfg.schedules()
    rates = {group: lr_at(spec, state.iteration) for group, spec in schedules.items()}
    for name, opt in state.optimizers.items():
        for g in opt.param_groups:
            g["lr"] = rates[GROUPS[name]]
    return rates


PHASES = ("discriminators", "generator", "encoders", "classifier")


def iter_phases(state: TrainState, src: ImageBatch, tgt: ImageBatch, cfg: Optional[ExperimentConfig] = None):
    """Run one iteration, yielding each phase name once its updates are applied.
    The final value (``StopIteration.value``) is the :class:`LossReport`."""
    cfg = cfg or state.cfg
    if src.domain is not Domain.SOURCE or tgt.domain is not Domain.TARGET:
        raise ValueError("expected a source batch and a target batch")
    if len(src) != len(tgt):
        raise ValueError("source and target batches must have equal size")
    if state.iteration >= state.t_max:
        raise RuntimeError("training already reached t_max")
    nets, opts, act = state.nets, state.optimizers, active_terms(cfg)
    dtype = next(nets.parameters()).dtype
    src = ImageBatch(src.pixels.to(dtype), src.domain, src.labels)
    tgt = ImageBatch(tgt.pixels.to(dtype), tgt.domain)
    x_s, y_s, x_t = src.pixels, src.labels, tgt.pixels
    encoder, texture_s, texture_t = nets.structure_encoder, nets.texture_encoder_s, nets.texture_encoder_t
    generator, classifier = nets.generator, nets.classifier
    params = {name: nets.parameters_of(name) for name in NETWORK_NAMES}
    set_learning_rates(state)
    terms: dict = {}

    # discriminators, against detached codes and images
    if act.advF or act.advI:
        with torch.no_grad():
            g_s, g_t = encoder(x_s), encoder(x_t)
            quad = transform_quadruple(nets, src, tgt, (g_s, texture_s(x_s), g_t, texture_t(x_t))) if act.advI else None
        if act.advF:
            obj = _checked("advF_d", L.advF_discriminator(nets.feature_disc, g_s.pooled, g_t.pooled))
            _step(opts["feature_disc"], params["feature_disc"], -obj)
            terms["advF_d"] = obj.detach()
        if act.advI:
            d_t = _checked("advI_d", L.advI_discriminator(nets.image_disc_t, x_t, quad.x_st))
            d_s = _checked("advI_d", L.advI_discriminator(nets.image_disc_s, x_s, quad.x_ts))
            _step(opts["image_disc_t"], params["image_disc_t"], d_t)
            _step(opts["image_disc_s"], params["image_disc_s"], d_s)
            terms["advI_d"] = (d_t + d_s).detach()
    yield "discriminators"

    real = _RealTaps(nets, cfg, x_s, x_t) if (act.per or act.rec) else None

    # generator, with the encoders' codes held fixed
    if act.generator:
        with torch.no_grad():
            codes = (encoder(x_s), texture_s(x_s), encoder(x_t), texture_t(x_t))
        quad = transform_quadruple(nets, src, tgt, codes)
        _step(opts["generator"], params["generator"], _generation_objective(cfg, _generation_terms(nets, cfg, act, quad, real)))
    yield "generator"

    # encoders: texture encoders on the generation terms; the structure
    # encoder on those plus classification and feature alignment
    g_s, g_t = encoder(x_s), encoder(x_t)
    extra = _checked("cls_s", L.cross_entropy(classifier(g_s.pooled), y_s))
    terms["cls_s"] = extra.detach()
    if act.advF:
        adv = _checked("advF_e", L.advF_encoder(nets.feature_disc, g_s.pooled, g_t.pooled))
        terms["advF_e"] = adv.detach()
        extra = extra + cfg.loss.alpha1 * adv
    eg_params = params["structure_encoder"]
    en_params = params["texture_encoder_s"] + params["texture_encoder_t"]
    eg_grads = None
    if act.needs_images:
        n_s, n_t = texture_s(x_s), texture_t(x_t)
        quad = transform_quadruple(nets, src, tgt, (g_s, n_s, g_t, n_t))
        gen_terms = _generation_terms(nets, cfg, act, quad, real)
        terms.update({k: v.detach() for k, v in gen_terms.items()})
        if act.cls_st:
            cls_st = _checked("cls_st", L.cross_entropy(classifier(encoder(quad.x_st).pooled), y_s))
            terms["cls_st"] = cls_st.detach()
            extra = extra + cls_st
        if act.generator:
            grads = torch.autograd.grad(_generation_objective(cfg, gen_terms), en_params + eg_params,
                                        retain_graph=True, allow_unused=True)
            en_grads, eg_grads = grads[: len(en_params)], grads[len(en_params):]
    # every gradient is taken before any encoder parameter moves
    extra_grads = torch.autograd.grad(extra, eg_params, allow_unused=True)
    if eg_grads is not None:
        extra_grads = [a if b is None else (b if a is None else a + b) for a, b in zip(extra_grads, eg_grads)]
        n_s = len(params["texture_encoder_s"])
        _apply(opts["texture_encoder_s"], params["texture_encoder_s"], en_grads[:n_s])
        _apply(opts["texture_encoder_t"], params["texture_encoder_t"], en_grads[n_s:])
    _apply(opts["structure_encoder"], eg_params, extra_grads)
    yield "encoders"

    # classifier, on source features and on transformed target-like images
    with torch.no_grad():
        f_s = encoder(x_s)
        feats = [f_s.pooled]
        if act.cls_st:
            x_st = generator(assemble(f_s.spatial, texture_t(x_t), Domain.TARGET).assembled)
            feats.append(encoder(x_st).pooled)
    cls = sum(L.cross_entropy(classifier(f), y_s) for f in feats)
    _step(opts["classifier"], params["classifier"], _checked("cls", cls))
    state.iteration += 1
    yield "classifier"
    return L.total_loss(terms, cfg.loss, cfg.ablation)


def train_step(state: TrainState, src: ImageBatch, tgt: ImageBatch, cfg: Optional[ExperimentConfig] = None) -> L.LossReport:
    phases = iter_phases(state, src, tgt, cfg)
    while True:
        try:
            next(phases)
        except StopIteration as done:
            return done.value


# --- checkpoints -------------------------------------------------------------------


def _optimizer_arrays(name: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    arrays, scalars = {}, {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                arrays[f"optim/{name}/{idx}/{key}"] = val.detach().cpu().numpy()
            else:
                scalars[f"{idx}/{key}"] = val
    return arrays, {"param_groups": sd["param_groups"], "scalars": scalars}


def _restore_optimizer(name: str, opt: torch.optim.Optimizer, meta: dict, arrays: dict) -> None:
    state: dict = {}
    prefix = f"optim/{name}/"
    for key, val in arrays.items():
        if key.startswith(prefix):
            idx, field_name = key[len(prefix):].split("/", 1)
            state.setdefault(int(idx), {})[field_name] = torch.from_numpy(val.copy())
    for key, val in meta["scalars"].items():
        idx, field_name = key.split("/", 1)
        state.setdefault(int(idx), {})[field_name] = val
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


def checkpoint_save(state: TrainState, path: str | Path) -> None:
    arrays = {f"params/{k}": v.detach().cpu().numpy() for k, v in state.nets.parameter_store().items()}
    optim_meta = {}
    for name, opt in state.optimizers.items():
        a, m = _optimizer_arrays(name, opt)
        arrays.update(a)
        optim_meta[name] = m
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    meta = {
        "kind": "checkpoint",
        "iteration": state.iteration,
        "t_max": state.t_max,
        "config": dump_config(state.cfg),
        "config_digest": state.cfg.digest(),
        "stream": state.stream_state,
        "best_target_accuracy": state.best_target_accuracy,
        "optimizers": optim_meta,
        "dtype": str(next(state.nets.parameters()).dtype),
    }
    write_container(path, json.loads(json.dumps(meta)), arrays)


def checkpoint_load(path: str | Path, cfg: Optional[ExperimentConfig] = None) -> TrainState:
    """Rebuild a :class:`TrainState`. With ``cfg`` given, that config's architecture
    is used and a digest mismatch only warns; otherwise the embedded config is used."""
    meta, arrays = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a training checkpoint")
    saved_cfg = loads_config(meta["config"])
    if cfg is None:
        cfg = saved_cfg
    elif cfg.digest() != meta["config_digest"]:
        warnings.warn(f"{path}: config digest differs from the checkpoint's", stacklevel=2)
    state = init_state(cfg)
    if meta.get("dtype") == "torch.float64":
        state.nets.double()
        state = init_state(cfg, state.nets)
    store = {k[len("params/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("params/")}
    state.nets.load_parameter_store(store)
    for name, opt in state.optimizers.items():
        _restore_optimizer(name, opt, meta["optimizers"][name], arrays)
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
    state.iteration = meta["iteration"]
    state.stream_state = meta["stream"]
    state.best_target_accuracy = meta["best_target_accuracy"]
    return state


# --- fit -------------------------------------------------------------------------


@dataclass
class FitResult:
    state: TrainState
    output_dir: Path
    checkpoints: list[Path] = field(default_factory=list)
    metrics: Optional[Path] = None
    evals: Optional[Path] = None
    grids: list[Path] = field(default_factory=list)
    last_eval: dict = field(default_factory=dict)


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_grids(nets: Networks, corpora: Corpora, rows: int, out_dir: Path, tag: str) -> list[Path]:
    """Rows of (input | reconstruction | cross-domain transform) for each domain."""
    src = corpora.source_eval or corpora.source
    tgt = corpora.target_eval.unlabeled() if corpora.target_eval is not None else corpora.target
    n = min(rows, len(src), len(tgt))
    from .data import to_tensor

    dtype = next(nets.parameters()).dtype
    xs = ImageBatch(to_tensor(src.images[:n]).to(dtype), Domain.SOURCE, torch.from_numpy(src.labels[:n]))
    xt = ImageBatch(to_tensor(tgt.images[:n]).to(dtype), Domain.TARGET)
    was = nets.training
    nets.eval()
    with torch.no_grad():
        q = transform_quadruple(nets, xs, xt)
    nets.train(was)
    paths = [out_dir / f"{tag}_source.png", out_dir / f"{tag}_target.png"]
    save_grid([xs.pixels, q.x_ss, q.x_st], paths[0])
    save_grid([xt.pixels, q.x_tt, q.x_ts], paths[1])
    return paths


def fit(cfg: ExperimentConfig, resume: Optional[str | Path] = None, corpora: Optional[Corpora] = None,
        on_eval: Optional[Callable[[int, dict], None]] = None, grids: bool = True) -> FitResult:
    out = cfg.output_path()
    ckpt_dir, grid_dir = out / "checkpoints", out / "grids"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    grid_dir.mkdir(parents=True, exist_ok=True)
    corpora = corpora or load_corpora(cfg.data)
    state = checkpoint_load(resume, cfg) if resume else init_state(cfg)
    t = cfg.trainer
    stream = batch_stream(corpora.source, corpora.target, t.batch_size, cfg.seed,
                          cfg.data.augment.crop_pad, cfg.data.augment.flip)
    if state.stream_state is not None:
        stream.restore(state.stream_state)
    result = FitResult(state, out, metrics=out / "metrics.csv", evals=out / "evals.csv")
    fresh = resume is None
    with open(result.metrics, "w" if fresh else "a", newline="") as mf, \
            open(result.evals, "w" if fresh else "a", newline="") as ef:
        metrics, evals = csv.writer(mf), csv.writer(ef)
        if fresh:
            metrics.writerow(METRIC_COLUMNS)
            evals.writerow(["iteration", "domain", "accuracy", "count"])
        start = time.perf_counter()
        while state.iteration < t.t_max:
            src, tgt = next(stream)
            rates = {g: lr_at(s, state.iteration) for g, s in cfg.schedules().items()}
            report = train_step(state, src, tgt, cfg)
            iteration = state.iteration
            last = iteration == t.t_max
            if iteration % t.log_every == 0 or last:
                row = report.as_dict()
                metrics.writerow([iteration] + [_fmt(row[k]) for k in L.TERMS + ("total",)]
                                 + [_fmt(rates[g]) for g in ("backbone", "discriminators", "generator")]
                                 + [f"{time.perf_counter() - start:.3f}"])
                mf.flush()
            if iteration % t.eval_every == 0 or last:
                result.last_eval = {}
                for domain, data in ((Domain.SOURCE, corpora.source_eval), (Domain.TARGET, corpora.target_eval)):
                    if data is None:
                        continue
                    r = evaluate(state.nets.structure_encoder, state.nets.classifier, data, domain, cfg.seed)
                    result.last_eval[domain.value] = r.accuracy
                    evals.writerow([iteration, domain.value, _fmt(r.accuracy), r.count])
                ef.flush()
                log.info("iter %d eval %s", iteration, result.last_eval)
                if on_eval:
                    on_eval(iteration, result.last_eval)
                acc = result.last_eval.get("target")
                if acc is not None and acc > state.best_target_accuracy:
                    state.best_target_accuracy = acc
                    state.stream_state = stream.state()
                    checkpoint_save(state, ckpt_dir / "best.ckpt")
            if iteration % t.checkpoint_every == 0 or last:
                state.stream_state = stream.state()
                path = ckpt_dir / ("final.ckpt" if last else f"iter_{iteration:07d}.ckpt")
                checkpoint_save(state, path)
                result.checkpoints.append(path)
                if grids:
                    result.grids += emit_grids(state.nets, corpora, t.grid_rows, grid_dir, f"iter_{iteration:07d}")
    state.stream_state = stream.state()
    return result


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)
