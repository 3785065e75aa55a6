"""Pipeline orchestration: load, split, attack, inject, train, evaluate, defend."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import attack as atk
from ..dataset import (EXPLICIT, DatasetStats, InteractionDataset, SplitSpec, cache_key,
                       compute_stats, convert_to_implicit, default_cache_root, load_cached,
                       load_explicit, persist_attacked, save_dataset, split_holdout)
from ..defense import SuspectReport, filter_users, oracle_suspects, pca_varselect
from ..metrics import (EvalReport, RatingPredictions, TopKGroundTruth, hit_rate, mae, ndcg_at_k,
                       prediction_shift, rank_improvement, rmse, target_truth, topk_metrics)
from ..recommender import (EmbeddingModel, TrainConfig, predict_ratings, save_model,
                           topk_for_users, train_bpr, train_itemknn, train_lightgcn,
                           train_mf_pointwise)
from .config import ExperimentConfig

log = logging.getLogger("shillrec.experiment")

RATING_MODELS = ("mf_pointwise",)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    run_dir: Path | None = None
    stats: dict = field(default_factory=dict)
    cache_keys: dict = field(default_factory=dict)
    cache_hit: bool = False
    attacked_ref: str | None = None
    model_files: dict = field(default_factory=dict)
    report: EvalReport | None = None
    suspects: SuspectReport | None = None
    log_path: Path | None = None
    files: list = field(default_factory=list)
    failure: dict | None = None


@contextlib.contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:   # noqa: BLE001 - every failure is attributed to its stage
        log.error("stage %s failed: %s", name, exc)
        raise StageError(name, exc) from exc
    log.info("stage %s: done in %.2fs", name, time.perf_counter() - t0)


# ------------------------------------------------------------------ data

def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def load_data(cfg: ExperimentConfig) -> InteractionDataset:
    ds = cfg["dataset"]
    d = load_explicit(ds["path"], ds["schema"], delimiter=ds["delimiter"], header=ds["header"],
                      rating_bounds=tuple(ds["rating_bounds"]) if ds["rating_bounds"] else None,
                      name=ds["name"])
    if ds["implicit"]:
        d = convert_to_implicit(d, ds["threshold"])
    return d


def split_spec(cfg: ExperimentConfig) -> SplitSpec:
    s = cfg["dataset"]["split"]
    seed = cfg.seed if s["seed"] is None else s["seed"]
    return SplitSpec(s["strategy"], s["train_fraction"], s["k"], seed)


def stats_summary(st: DatasetStats, d: InteractionDataset) -> dict:
    return {
        "n_users": d.n_users, "n_items": d.n_items, "n_interactions": len(d),
        "feedback_kind": d.feedback_kind, "global_mean": st.global_mean,
        "global_std": st.global_std, "avg_actions_per_user": st.avg_actions_per_user,
    }


# ---------------------------------------------------------------- attack

def default_target_count(kind: str, attack_size: int) -> int:
    if kind == EXPLICIT:
        return max(1, attack_size // 3)
    return max(1, int(math.floor(0.005 * attack_size)))


def resolve_attack_params(cfg: ExperimentConfig, train: InteractionDataset,
                          st: DatasetStats) -> atk.AttackParams | None:
    a = cfg["attack"]
    if a["name"] == "none":
        return None
    seed = cfg.seed if a["seed"] is None else a["seed"]
    size = a["attack_size"]
    if size is None:
        size = int(math.floor(a["attack_fraction"] * train.n_users))
    filler = a["filler_size"] if a["filler_size"] is not None else int(round(st.avg_actions_per_user))
    mode = a["target_mode"]
    count = a["target_count"] or default_target_count(train.feedback_kind, size)
    if mode == "explicit":
        index = {str(raw): n for n, raw in enumerate(train.item_ids)}
        missing = [t for t in a["target_items"] if str(t) not in index]
        if missing or not a["target_items"]:
            raise atk.AttackError(f"unknown or empty explicit target items: {missing}")
        targets = [index[str(t)] for t in a["target_items"]]
    else:
        if mode == "auto":
            mode = "popular" if train.feedback_kind == EXPLICIT else "random"
        targets = atk.select_targets(train, st, count, mode, seed)
    kind = atk.EXPLICIT_TRIPLETS if train.feedback_kind == EXPLICIT else atk.IMPLICIT_PAIRS
    return atk.AttackParams(attack_size=size, filler_size=filler, target_items=tuple(targets),
                            intent=a["intent"], seed=seed, output_kind=kind)


def surrogate_spec(cfg: ExperimentConfig) -> atk.SurrogateSpec:
    s = cfg["attack"]["surrogate"]
    tc = TrainConfig(task="ranking", d=s["d"], learning_rate=s["learning_rate"],
                     l2_reg=s["l2_reg"], seed=cfg.seed)
    return atk.SurrogateSpec(
        model=s["model"], train_config=tc, inner_steps=s["inner_steps"],
        outer_steps=s["outer_steps"], outer_step_size=s["outer_step_size"],
        unroll_steps=s["unroll_steps"], pretrain_steps=s["pretrain_steps"],
        negative_weight=s["negative_weight"], margin_rank=s["margin_rank"],
        adv_users=s["adv_users"], init=s["init"])


def generate_fakes(cfg: ExperimentConfig, train: InteractionDataset, st: DatasetStats,
                   params: atk.AttackParams) -> atk.FakeProfileSet:
    a = cfg["attack"]
    name = a["name"]
    if name in ("random", "average"):
        return atk.HEURISTICS[name](train, params, stats=st)
    if name == "bandwagon":
        b = a["bandwagon"]
        return atk.gen_bandwagon_attack(train, params, b["popular_fraction"],
                                        b["popularity_rule"], stats=st)
    if name == "lovehate":
        return atk.gen_lovehate_attack(train, params)
    if name == "segment":
        seg = atk.segment_by_similarity(train, params.target_items[0], a["segment"]["size"])
        seg = [i for i in seg if i not in params.target_items]
        return atk.gen_segment_attack(train, params, seg)
    if name == "single_level":
        return atk.gen_single_level_gradient_attack(train, surrogate_spec(cfg), params)
    if name == "bilevel":
        return atk.gen_bilevel_attack(train, surrogate_spec(cfg), params)
    raise atk.AttackError(f"unknown attack {name!r}")


def attack_cache_key(cfg: ExperimentConfig, data_digest: str) -> str:
    return cache_key(
        data=data_digest,
        dataset={k: v for k, v in cfg["dataset"].items() if k not in ("path", "name")},
        split=split_spec(cfg).__dict__,
        attack=cfg["attack"],
        seed=cfg.seed,
    )


def attacked_dataset(cfg, train, st, params, art: RunArtifacts, cache_root):
    """Poisoned training set, served from the content-keyed cache when possible."""
    if params is None:
        return train
    key = attack_cache_key(cfg, art.cache_keys["data"])
    art.cache_keys["attack"] = key
    root = Path(cache_root) if cache_root is not None else default_cache_root()
    cached = load_cached(key, root)
    if cached is not None:
        log.info("cache hit: attacked data %s", key)
        art.cache_hit = True
        art.attacked_ref = str(root / key)
        return cached
    log.info("cache miss: generating attack %s", key)
    with stage("attack"):
        fakes = generate_fakes(cfg, train, st, params)
        if "loss_trace" in fakes.notes:
            log.info("attack loss trace: %s", fakes.notes["loss_trace"])
    with stage("inject"):
        attacked = atk.inject(train, fakes)
    art.attacked_ref = str(persist_attacked(attacked, key, root, params=params.as_dict()))
    return attacked


# ---------------------------------------------------------------- victim

def train_victim(cfg: ExperimentConfig, data: InteractionDataset):
    v = cfg["victim"]
    model = v["model"]
    if model == "itemknn":
        return train_itemknn(data, v["k_neighbors"])
    rating = model in RATING_MODELS
    tc = TrainConfig(task="rating" if rating else "ranking",
                     loss="squared_pointwise" if rating else "bpr_pairwise",
                     d=v["d"], learning_rate=v["learning_rate"], l2_reg=v["l2_reg"],
                     epochs=v["epochs"], negatives_per_positive=v["negatives_per_positive"],
                     batch_size=v["batch_size"], seed=cfg.seed)
    if model == "mf_pointwise":
        return train_mf_pointwise(data, tc)
    if model == "bpr_mf":
        return train_bpr(data, tc)
    return train_lightgcn(data, tc, n_layers=v["n_layers"])


# ------------------------------------------------------------ evaluation

def _align_test(test: InteractionDataset, train: InteractionDataset):
    """Test interactions re-expressed in ``train``'s user index space."""
    index = {u: n for n, u in enumerate(train.user_ids)}
    mapped = np.array([index.get(test.user_ids[u], -1) for u in test.users], dtype=np.int64)
    keep = mapped >= 0
    return mapped[keep], test.items[keep], test.ratings[keep]


def evaluate(cfg: ExperimentConfig, model, train: InteractionDataset, test: InteractionDataset,
             targets) -> dict:
    ks = sorted(set(cfg["metrics"]["k"]))
    kmax = ks[-1]
    genuine = [int(u) for u in train.genuine_users]
    out = {}
    tu, ti, tr = _align_test(test, train)
    if cfg["victim"]["model"] in RATING_MODELS and len(tu):
        pred = predict_ratings(model, tu, ti)
        rp = RatingPredictions(pred, tr, tu, ti)
        out["test/MAE"] = mae(rp)
        out["test/RMSE"] = rmse(rp)
    test_users = sorted(set(int(u) for u in tu))
    users = sorted(set(genuine) | set(test_users))
    rec = topk_for_users(model, users, kmax, train)
    relevant: dict = {}
    for u, i in zip(tu, ti):
        relevant.setdefault(int(u), set()).add(int(i))
    for k in ks:
        if test_users:
            gt = TopKGroundTruth({u: rec[u] for u in test_users}, relevant, k)
            out.update(topk_metrics(gt, prefix="test/"))
        if targets:
            tgt = target_truth(rec, targets, genuine, k)
            out[f"target/HR@{k}"] = hit_rate(tgt)
            out[f"target/NDCG@{k}"] = ndcg_at_k(tgt)
    return out


def _prefixed(condition: str, metrics: dict) -> dict:
    return {f"{condition}/{k}": v for k, v in metrics.items()}


def _save_model(art: RunArtifacts, model, condition: str):
    if art.run_dir is None or not isinstance(model, EmbeddingModel):
        return
    d = art.run_dir / "models"
    d.mkdir(exist_ok=True)
    path = save_model(model, d / f"{condition}.npz")
    art.model_files[condition] = str(path.relative_to(art.run_dir))
    art.files.append(art.model_files[condition])


# --------------------------------------------------------------- running

def prepare_run_dir(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Create and probe the run directory before any stage executes."""
    base = Path(out_dir if out_dir is not None else cfg["output_dir"])
    run_dir = base / cfg.run_name()
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {run_dir} is not writable: {exc}") from exc
    return run_dir


@contextlib.contextmanager
def _run_logging(run_dir: Path | None):
    if run_dir is None:
        yield None
        return
    path = run_dir / "run.log"
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("shillrec")
    old_level = root.level
    root.addHandler(handler)
    if root.level == logging.NOTSET or root.level > logging.INFO:
        root.setLevel(logging.INFO)
    try:
        yield path
    finally:
        root.removeHandler(handler)
        root.setLevel(old_level)
        handler.close()


def _start(cfg, out_dir, write):
    art = RunArtifacts(cfg)
    if write:
        art.run_dir = prepare_run_dir(cfg, out_dir)
        (art.run_dir / "config.resolved.yaml").write_text(cfg.snapshot())
        art.files.append("config.resolved.yaml")
    return art


def _common(cfg, art: RunArtifacts, cache_root):
    """Load, split, stats, attack. Returns (train, test, stats, params, attacked)."""
    with stage("load"):
        data = load_data(cfg)
        art.cache_keys["data"] = cache_key(file=_file_digest(Path(cfg["dataset"]["path"])),
                                           schema=cfg["dataset"]["schema"],
                                           implicit=cfg["dataset"]["implicit"],
                                           threshold=cfg["dataset"]["threshold"])
    with stage("split"):
        train, test = split_holdout(data, split_spec(cfg))
    with stage("stats"):
        st = compute_stats(train)
        art.stats = stats_summary(st, train)
    with stage("attack-params"):
        params = resolve_attack_params(cfg, train, st)
    attacked = attacked_dataset(cfg, train, st, params, art, cache_root)
    return train, test, st, params, attacked


def _meta(cfg, art, params, task):
    return {
        "run": cfg.run_name(),
        "config_digest": cfg.digest(),
        "task": task,
        "dataset": art.stats,
        "attack": None if params is None else params.as_dict(),
        "cache_keys": dict(sorted(art.cache_keys.items())),
    }


def _finish(art: RunArtifacts, write: bool):
    if write:
        write_report(art)
    return art


def _guarded(fn):
    """Record a stage failure in the run directory before re-raising."""

    def wrapper(cfg, *args, **kwargs):
        holder = {}
        kwargs["_holder"] = holder
        try:
            return fn(cfg, *args, **kwargs)
        except StageError as exc:
            art = holder.get("art")
            if art is not None and art.run_dir is not None:
                art.failure = {"stage": exc.stage, "error": str(exc.cause),
                               "type": type(exc.cause).__name__}
                (art.run_dir / "failure.json").write_text(
                    json.dumps(art.failure, sort_keys=True, indent=2) + "\n")
            raise

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_guarded
def run_attack_eval(cfg: ExperimentConfig, out_dir=None, *, cache_root=None, write=True,
                    _holder=None) -> RunArtifacts:
    """Clean vs. attacked evaluation for one resolved config."""
    art = _start(cfg, out_dir, write)
    _holder["art"] = art
    with _run_logging(art.run_dir) as log_path:
        art.log_path = log_path
        log.info("run %s (config %s)", cfg.run_name(), cfg.digest())
        train, test, st, params, attacked = _common(cfg, art, cache_root)
        targets = list(params.target_items) if params else []
        with stage("train-clean"):
            clean = train_victim(cfg, train)
            _save_model(art, clean, "clean")
        with stage("evaluate-clean"):
            m_clean = evaluate(cfg, clean, train, test, targets)
        if attacked is train or len(attacked.fake_users) == 0:
            poisoned, m_att = clean, dict(m_clean)
        else:
            with stage("train-attacked"):
                poisoned = train_victim(cfg, attacked)
                _save_model(art, poisoned, "attacked")
            with stage("evaluate-attacked"):
                m_att = evaluate(cfg, poisoned, attacked, test, targets)
        metrics = {**_prefixed("clean", m_clean), **_prefixed("attacked", m_att)}
        for k in m_clean:
            if k in m_att:
                metrics[f"delta/{k}"] = m_att[k] - m_clean[k]
        task = "rating" if cfg["victim"]["model"] in RATING_MODELS else "ranking"
        if task == "rating" and targets:
            genuine = train.genuine_users
            metrics["attacked/PS"] = prediction_shift(clean, poisoned, targets, genuine)
        art.report = EvalReport(metrics, _meta(cfg, art, params, task))
        return _finish(art, write)


def defend(cfg: ExperimentConfig, attacked: InteractionDataset, params) -> SuspectReport:
    d = cfg["defense"]
    method = d["method"]
    if method in ("none", "identity"):
        return SuspectReport(frozenset(), np.zeros(attacked.n_users), 0, 0,
                             meta={"detector": "identity"})
    if method == "oracle":
        return oracle_suspects(attacked)
    flag = d["flag_count"]
    if flag is None:
        flag = params.attack_size if params is not None else 0
    rep = pca_varselect(attacked, d["n_components"], flag)
    rep.meta["detector"] = "pca"
    return rep


@_guarded
def run_robustness_eval(cfg: ExperimentConfig, out_dir=None, *, cache_root=None, write=True,
                        _holder=None) -> RunArtifacts:
    """HR before attack, after attack and after defense, plus rank improvement."""
    art = _start(cfg, out_dir, write)
    _holder["art"] = art
    with _run_logging(art.run_dir) as log_path:
        art.log_path = log_path
        log.info("robustness run %s (config %s)", cfg.run_name(), cfg.digest())
        train, test, st, params, attacked = _common(cfg, art, cache_root)
        if params is None:
            raise StageError("attack-params", ValueError("robustness evaluation needs an attack"))
        targets = list(params.target_items)
        with stage("train-clean"):
            clean = train_victim(cfg, train)
        with stage("evaluate-clean"):
            m_clean = evaluate(cfg, clean, train, test, targets)
        with stage("train-attacked"):
            poisoned = train_victim(cfg, attacked)
        with stage("evaluate-attacked"):
            m_att = evaluate(cfg, poisoned, attacked, test, targets)
        with stage("detect"):
            suspects = defend(cfg, attacked, params)
            art.suspects = suspects
            if attacked.is_fake is not None:
                log.info("detector confusion: %s", suspects.confusion(attacked.is_fake))
        if not suspects.flagged_users:
            m_def = dict(m_att)
        else:
            with stage("filter"):
                kept = filter_users(attacked, suspects)
            with stage("train-defended"):
                defended = train_victim(cfg, kept)
            with stage("evaluate-defended"):
                m_def = evaluate(cfg, defended, kept, test, targets)
        metrics = {**_prefixed("clean", m_clean), **_prefixed("attacked", m_att),
                   **_prefixed("defended", m_def)}
        ri_undefined = []
        for k in sorted(set(cfg["metrics"]["k"])):
            key = f"target/HR@{k}"
            ri = rank_improvement(m_clean[key], m_att[key], m_def[key])
            metrics[f"robustness/RI@{k}"] = ri
            if ri is None:
                ri_undefined.append(k)
        meta = _meta(cfg, art, params, "ranking")
        meta["defense"] = {"method": cfg["defense"]["method"],
                           "n_components": suspects.n_components,
                           "flag_count": suspects.flag_count,
                           "n_flagged": len(suspects.flagged_users)}
        if attacked.is_fake is not None:
            meta["defense"]["confusion"] = suspects.confusion(attacked.is_fake)
        if ri_undefined:
            meta["ri_not_applicable"] = ri_undefined
        art.report = EvalReport(metrics, meta)
        if write and art.run_dir is not None:
            (art.run_dir / "suspects.json").write_text(suspects.to_json(attacked.is_fake))
            art.files.append("suspects.json")
        return _finish(art, write)


def run(cfg: ExperimentConfig, out_dir=None, **kwargs) -> RunArtifacts:
    if cfg["defense"]["method"] != "none":
        return run_robustness_eval(cfg, out_dir, **kwargs)
    return run_attack_eval(cfg, out_dir, **kwargs)


def run_attack_only(cfg: ExperimentConfig, out_dir=None, *, cache_root=None) -> Path:
    """Emit the attacked training set without training any model."""
    art = _start(cfg, out_dir, True)
    with _run_logging(art.run_dir):
        _, _, _, params, attacked = _common(cfg, art, cache_root)
        target = save_dataset(attacked, art.run_dir / "attacked")
        meta = {"attack": None if params is None else params.as_dict(),
                "cache_keys": dict(sorted(art.cache_keys.items())),
                "n_fake_users": int(len(attacked.fake_users)) if attacked.is_fake is not None else 0}
        (art.run_dir / "attack.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return target


# ---------------------------------------------------------------- output

def write_report(art: RunArtifacts) -> list:
    if art.run_dir is None or art.report is None:
        raise ValueError("nothing to write: run directory or report missing")
    d = art.run_dir
    (d / "report.json").write_text(art.report.to_json())
    (d / "report.txt").write_text(art.report.to_table())
    files = sorted(set(art.files) | {"report.json", "report.txt", "run.log"})
    manifest = {
        "config_digest": art.config.digest(),
        "sources": list(art.config.sources),
        "cache_keys": dict(sorted(art.cache_keys.items())),
        "cache_hit": art.cache_hit,
        "attacked_ref": art.attacked_ref,
        "models": dict(sorted(art.model_files.items())),
        "stats": art.stats,
        "files": files,
    }
    (d / "artifacts.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    art.files = files + ["artifacts.json"]
    return art.files
