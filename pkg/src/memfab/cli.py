"""Pipeline stages (train, fabricate, audit, detect, robust, report) and the command-line entry."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .config import ConfigError, ExperimentConfig, RunManifest, load_config, stable_hash
from .data import build_dataset
from .defense import RobustWeightConfig, calibrate_lambda
from .fabrication import FabricationBatch, FabricationConfig, fabricate, load_fabricated, save_fabricated
from .games import (
    CSV_FIELDS,
    EmptySelectionError,
    FabricationCache,
    GameOutcome,
    MalformedRecordError,
    armia_metrics,
    mfd_roc,
    read_records,
    run_armia_game,
    run_mfa_game,
    run_mfd_game,
    run_mi_game,
)
from .mia import Auditor, StatisticKind
from .model_core import (
    MembershipSplit,
    ShadowEnsemble,
    checkpoint_name,
    load_model,
    make_membership_splits,
    save_model,
    train_classifier,
    train_shadow_ensemble,
)
from .seeding import derive_seed

logger = logging.getLogger("memfab")

STAGES = ("train", "fabricate", "audit", "detect", "robust", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


class MissingPrerequisiteError(StageError):
    pass


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------


def stage_seeds(cfg: ExperimentConfig) -> dict:
    s = cfg.seed
    return {
        "split": derive_seed(s, "split"),
        "target": derive_seed(s, "target"),
        "shadows": derive_seed(s, "shadows"),
        "calibration": derive_seed(s, "calibration"),
        "fabricate": derive_seed(s, "fabricate"),
        "armia": derive_seed(s, "armia"),
    }


def _train_hash(cfg: ExperimentConfig) -> str:
    return cfg.section_hash("dataset", "arch", "arch_kwargs", "n_train", "n_shadow", "n_eval", "train", "seed")


def _fab_configs(cfg: ExperimentConfig, seeds: dict) -> dict[str, FabricationConfig]:
    """Tagged fabrication configs: the primary one plus every (variant, epsilon) pair."""
    base = replace(cfg.fabrication, seed=seeds["fabricate"])
    out = {_tag(base): base}
    ratio = base.alpha0 / base.epsilon if base.epsilon > 0 else 0.25
    for v in cfg.variants:
        for eps in cfg.epsilons:
            fc = replace(base, variant=v, epsilon=eps, alpha0=ratio * eps, adaptive_lambda=0.0)
            out.setdefault(_tag(fc), fc)
    return out


def _tag(fab: FabricationConfig) -> str:
    tag = f"{fab.variant}-eps{fab.epsilon * 255:g}"
    if fab.adaptive_lambda:
        tag += f"-adv{fab.adaptive_lambda:g}"
    return tag


class RunContext:
    """Loads (lazily) the artifacts a stage needs, raising a named error when one is absent."""

    def __init__(self, cfg: ExperimentConfig, out: Path, stage: str):
        self.cfg, self.out, self.stage = cfg, out, stage
        self.seeds = stage_seeds(cfg)
        self._ds = None
        self.cache = FabricationCache()
        self._target = self._ensemble = None

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise MissingPrerequisiteError(self.stage, f"missing prerequisite artifact: {path}")
        return path

    @property
    def dataset(self):
        if self._ds is None:
            self._ds = build_dataset(self.cfg.dataset)
        return self._ds

    @property
    def split(self) -> MembershipSplit:
        return MembershipSplit.load(self.require(self.out / "split.json"))

    @property
    def target(self):
        if self._target is None:
            self._target = load_model(
                self.require(self.out / "models" / "target" / checkpoint_name(self.cfg.arch, self.seeds["target"]))
            )
        return self._target

    @property
    def ensemble(self) -> ShadowEnsemble | None:
        if self._ensemble is None and self.cfg.n_shadow:
            man = json.loads(self.require(self.out / "models" / "shadow" / "manifest.json").read_text())
            models = [load_model(self.require(self.out / "models" / "shadow" / p)) for p in man["checkpoints"]]
            self._ensemble = ShadowEnsemble(models, [tuple(m) for m in man["splits"]])
        return self._ensemble

    def fabricated(self, tag: str, fab: FabricationConfig) -> FabricationBatch:
        """Load a persisted fabricated set and register it with the cache."""
        ids, x, y = load_fabricated(self.require(self.out / "fabricated" / f"{tag}.npz"))
        split = self.split
        if ids != split.eval_nonmembers:
            raise StageError(self.stage, f"fabricated set {tag} does not match the evaluation nonmembers")
        orig = self.dataset.subset(ids).x
        batch = FabricationBatch(x, orig, np.zeros((len(ids), 0)), np.zeros((len(ids), 0)), fab.steps)
        self.cache.put(self.target, ids, fab, batch)
        return batch


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))
    return path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunManifest:
    ctx = RunContext(cfg, out, "train")
    seeds, h = ctx.seeds, _train_hash(cfg)
    man_path = out / "train.json"
    if man_path.exists():
        old = RunManifest.read(man_path)
        if old.config_hash == h and all((out / a).exists() for a in old.artifacts):
            old.notes = [n for n in old.notes if n != "cache hit"] + ["cache hit"]
            old.write(man_path)
            logger.info("train: cache hit (%s)", h)
            return old

    ds = ctx.dataset
    split = make_membership_splits(ds, cfg.n_train, cfg.n_shadow, seeds["split"], cfg.n_eval)
    split.save(out / "split.json")
    artifacts = ["split.json"]

    tcfg = replace(cfg.train, seed=seeds["target"])
    target = train_classifier(ds, split, tcfg, cfg.arch, cfg.arch_kwargs)
    p = save_model(target, out / "models" / "target", tcfg.seed, tcfg)
    artifacts.append(str(p.relative_to(out)))
    metrics_ = {"target_checksum": target.checksum(), "target_final_loss": target.meta["loss_history"][-1:]}

    if cfg.n_shadow:
        scfg = replace(cfg.train, seed=seeds["shadows"])
        ens = train_shadow_ensemble(ds, split, scfg, cfg.n_shadow, cfg.arch, cfg.arch_kwargs, workers)
        names = []
        for j, m in enumerate(ens.models):
            s = derive_seed(scfg.seed, "shadow", j)
            names.append(save_model(m, out / "models" / "shadow", s).name)
        _write_json(out / "models" / "shadow" / "manifest.json", {"checkpoints": names, "splits": ens.manifest})
        artifacts += [f"models/shadow/{n}" for n in names] + ["models/shadow/manifest.json"]

    if cfg.lambda_grid:
        # a calibration model trained on data outside the evaluation pool, for choosing lambda
        evals = set(split.eval_ids)
        rest = [sid for sid in ds.ids if sid not in evals]
        rng = np.random.default_rng(seeds["calibration"])
        rest = [rest[i] for i in rng.permutation(len(rest))]
        half = len(rest) // 2
        n_eval = min(half, len(rest) - half)
        members, pool = sorted(rest[:half]), sorted(rest[half:])
        csplit = MembershipSplit(members, pool, sorted(members[:n_eval]), sorted(pool[:n_eval]), [], seeds["calibration"])
        csplit.save(out / "calibration_split.json")
        ccfg = replace(cfg.train, seed=seeds["calibration"])
        cm = train_classifier(ds, members, ccfg, cfg.arch, cfg.arch_kwargs)
        p = save_model(cm, out / "models" / "calibration", ccfg.seed, ccfg)
        artifacts += ["calibration_split.json", str(p.relative_to(out))]

    man = RunManifest("train", h, seeds, artifacts, metrics_)
    man.write(man_path)
    return man


def cmd_fabricate(cfg: ExperimentConfig, out: Path) -> RunManifest:
    ctx = RunContext(cfg, out, "fabricate")
    split, target = ctx.split, ctx.target
    non = ctx.dataset.subset(split.eval_nonmembers)
    artifacts, notes, mets = [], [], {}
    for tag, fab in sorted(_fab_configs(cfg, ctx.seeds).items()):
        arc = out / "fabricated" / f"{tag}.npz"
        sidecar = out / "fabricated" / f"{tag}.json"
        h = stable_hash({"fab": asdict(fab), "train": _train_hash(cfg)})
        if arc.exists() and sidecar.exists() and json.loads(sidecar.read_text()).get("hash") == h:
            notes.append(f"{tag}: cache hit")
        else:
            batch = fabricate(target, non.x, non.y, fab, ids=non.ids)
            save_fabricated(batch, non.ids, non.y.numpy(), fab, out / "fabricated", tag)
            identity = bool(torch.equal(batch.x_bar.float(), non.x))
            _write_json(sidecar, {"hash": h, "config": asdict(fab), "identity": identity})
            mets[tag] = {
                "mean_final_loss": float(batch.final_loss.mean()),
                "median_final_gradnorm": float(np.median(batch.final_gradnorm)),
            }
        side = json.loads(sidecar.read_text())
        if side.get("identity"):
            notes.append(f"{tag}: identity perturbation (epsilon = 0)")
        artifacts += [f"fabricated/{tag}.npz", f"fabricated/{tag}.csv", f"fabricated/{tag}.json"]
    man = RunManifest("fabricate", stable_hash(asdict(cfg.fabrication)), ctx.seeds, artifacts, mets, notes)
    man.write(out / "fabricate.json")
    return man


def _auditor(ctx: RunContext, kind: StatisticKind, target=None, split=None) -> Auditor:
    target = target or ctx.target
    ens = ctx.ensemble if kind is not StatisticKind.loss else None
    population = None
    if kind is StatisticKind.rmia:
        split = split or ctx.split
        evals = set(split.eval_ids)
        pool = [sid for sid in split.nonmember_pool if sid not in evals][:500] or split.eval_nonmembers
        sub = ctx.dataset.subset(pool)
        population = (sub.x, sub.y)
    return Auditor(target, ens, population)


def cmd_audit(cfg: ExperimentConfig, out: Path) -> RunManifest:
    ctx = RunContext(cfg, out, "audit")
    split, ds, target = ctx.split, ctx.dataset, ctx.target
    fabs = _fab_configs(cfg, ctx.seeds)
    for tag, fab in fabs.items():
        ctx.fabricated(tag, fab)
    artifacts, mets = [], {}
    for kind_s in cfg.statistics:
        kind = StatisticKind(kind_s)
        aud = _auditor(ctx, kind)
        mi = run_mi_game(target, ds, split, kind, ctx.ensemble, auditor=aud)
        p = mi.write_csv(out / "audit" / f"mi-{kind.value}.csv")
        artifacts.append(str(p.relative_to(out)))
        nat = metrics.tnr_tpr_curve(mi.member_scores(), mi.column("statistic")[mi.column("member") == 0])
        mets[f"mi-{kind.value}"] = {"auc": metrics.auc(mi.roc()), "error_area": metrics.error_area(nat)}
        for tag, fab in sorted(fabs.items()):
            o = run_mfa_game(target, ds, split, kind, fab, ctx.ensemble, auditor=aud, cache=ctx.cache)
            name = f"mfa-{kind.value}-{tag}"
            artifacts.append(str(o.write_csv(out / "audit" / f"{name}.csv").relative_to(out)))
            artifacts.append(str(o.write_queries(out / "audit" / f"{name}-queries.npz").relative_to(out)))
            curve = metrics.tnr_tpr_curve(o)
            mets[name] = {"error_area": metrics.error_area(curve), "eer": metrics.eer(o.roc())}
    man = RunManifest("audit", cfg.section_hash("statistics", "fabrication", "variants", "epsilons"), ctx.seeds, artifacts, mets)
    man.write(out / "audit.json")
    return man


def cmd_detect(cfg: ExperimentConfig, out: Path, backend: str = "exact") -> RunManifest:
    ctx = RunContext(cfg, out, "detect")
    split, ds, target = ctx.split, ctx.dataset, ctx.target
    fab = replace(cfg.fabrication, seed=ctx.seeds["fabricate"])
    tag = _tag(fab)
    ctx.fabricated(tag, fab)
    game_backend = "fd" if backend in ("fd", "finite_difference") else "exact"
    try:
        o = run_mfd_game(
            target, ds, split, fab, backend=game_backend, fd=cfg.fd,
            prefilter_negatives=cfg.prefilter_negatives, cache=ctx.cache,
        )
    except EmptySelectionError as err:
        mets = {"auc": None, "n_selected_members": 0, "n_selected_fabricated": 0}
        man = RunManifest("detect", cfg.section_hash("fabrication", "fd", "prefilter_negatives"), ctx.seeds, [], mets, [str(err)])
        man.write(out / f"detect-{game_backend}.json")
        return man
    drop = "grad_norm" if game_backend == "fd" else "grad_norm_fd"
    cols = [c for c in CSV_FIELDS if c != drop]
    p = o.write_csv(out / "detect" / f"mfd-{tag}-{game_backend}.csv", cols)
    column = "grad_norm_fd" if game_backend == "fd" else "grad_norm"
    mets = {k: v for k, v in o.config.items() if k.startswith("n_selected") or k == "prefilter_tau"}
    notes = []
    try:
        mets["auc"] = metrics.auc(mfd_roc(o, column))
    except metrics.SingleClassError:
        mets["auc"] = None
        notes.append("detector ROC undefined: the pre-filter kept only one class")
    man = RunManifest("detect", cfg.section_hash("fabrication", "fd", "prefilter_negatives"), ctx.seeds, [str(p.relative_to(out))], mets, notes)
    man.write(out / f"detect-{game_backend}.json")
    return man


def cmd_robust(cfg: ExperimentConfig, out: Path) -> RunManifest:
    ctx = RunContext(cfg, out, "robust")
    split, ds, target = ctx.split, ctx.dataset, ctx.target
    fab = replace(cfg.fabrication, seed=ctx.seeds["fabricate"])
    ctx.fabricated(_tag(fab), fab)
    mets, artifacts = {}, []
    chosen = None
    if cfg.lambda_grid:
        cal = load_model(
            ctx.require(out / "models" / "calibration" / checkpoint_name(cfg.arch, ctx.seeds["calibration"]))
        )
        csplit = MembershipSplit.load(ctx.require(out / "calibration_split.json"))
        ckind = StatisticKind(cfg.calibration_kind)
        chosen = calibrate_lambda(
            cal, ds, csplit, cfg.lambda_grid, "auc", ckind.value, fab, cfg.mixture,
            ctx.ensemble if ckind is not StatisticKind.loss else None,
        )
    mets["chosen_lambda"] = chosen
    for kind_s in cfg.statistics:
        kind = StatisticKind(kind_s)
        w = RobustWeightConfig(chosen or 1.0, list(cfg.lambda_grid))
        o = run_armia_game(
            target, ds, split, kind, fab, w, cfg.mixture, ctx.ensemble,
            auditor=_auditor(ctx, kind), cache=ctx.cache, seed=ctx.seeds["armia"],
        )
        p = o.write_csv(out / "robust" / f"armia-{kind.value}-base.csv")
        artifacts.append(str(p.relative_to(out)))
        rows = {"base": armia_metrics(o, None)}
        for lam in cfg.lambda_grid:
            o_l = _reweighted(o, lam)
            p = o_l.write_csv(out / "robust" / f"armia-{kind.value}-lam{lam:g}.csv")
            artifacts.append(str(p.relative_to(out)))
            rows[f"lambda={lam:g}"] = armia_metrics(o, lam)
        mets[kind.value] = rows
    man = RunManifest("robust", cfg.section_hash("statistics", "lambda_grid", "mixture", "fabrication"), ctx.seeds, artifacts, mets)
    man.write(out / "robust.json")
    return man


def _reweighted(o: GameOutcome, lam: float) -> GameOutcome:
    from .defense import ar_statistic, robustness_weight

    recs = [replace(r, weight=float(robustness_weight(r.grad_norm, lam)), ar_statistic=float(ar_statistic(r.statistic, r.grad_norm, lam))) for r in o.records]
    return GameOutcome(recs, o.protocol, {**o.config, "lambda": lam})


def _outcome_from_csv(path: Path, protocol: str) -> GameOutcome:
    return GameOutcome(read_records(path), protocol)


def cmd_report(cfg: ExperimentConfig, out: Path) -> dict:
    rep = out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    lines, summary = [], {}

    audit = sorted((out / "audit").glob("mfa-*.csv")) if (out / "audit").exists() else []
    if audit:
        lines += ["## Fabrication: Error Area / EER", "", "| statistic | setting | Error Area | EER |", "|---|---|---|---|"]
        for kind in cfg.statistics:
            curves = {}
            mi_path = out / "audit" / f"mi-{kind}.csv"
            if mi_path.exists():
                mi = _outcome_from_csv(mi_path, "mi")
                nat = metrics.tnr_tpr_curve(mi.member_scores(), mi.column("statistic")[mi.column("member") == 0])
                ea = metrics.error_area(nat)
                roc = mi.roc()
                lines.append(f"| {kind} | natural | {ea:.4f} | {100 * metrics.eer(roc):.2f}% |")
                summary[f"{kind}/natural"] = {"error_area": ea, "eer": metrics.eer(roc)}
                curves["natural"] = nat
            for p in audit:
                if not p.stem.startswith(f"mfa-{kind}-"):
                    continue
                o = _outcome_from_csv(p, "mfa")
                c = metrics.tnr_tpr_curve(o)
                ea, e = metrics.error_area(c), metrics.eer(o.roc())
                setting = p.stem[len(f"mfa-{kind}-"):]
                lines.append(f"| {kind} | {setting} | {ea:.4f} | {100 * e:.2f}% |")
                summary[f"{kind}/{setting}"] = {"error_area": ea, "eer": e}
                curves[setting] = c
                metrics.write_curve_csv(c, rep / f"tnr_tpr-{kind}-{setting}.csv")
            metrics.plot_curves(curves, rep / f"tnr_tpr-{kind}-loglog.png", log=True, title=kind)
            metrics.plot_curves(curves, rep / f"tnr_tpr-{kind}.png", title=kind)
        lines.append("")

    for p in sorted(out.glob("detect-*.json")):
        m = RunManifest.read(p)
        lines += [f"## Detection ({p.stem})", "", f"AUC: {m.metrics.get('auc')}",
                  f"selected members / fabricated: {m.metrics.get('n_selected_members')} / {m.metrics.get('n_selected_fabricated')}", ""]
        summary[p.stem] = m.metrics

    robust = out / "robust.json"
    if robust.exists():
        m = RunManifest.read(robust)
        lines += [f"## Robust audit (chosen lambda: {m.metrics.get('chosen_lambda')})", ""]
        head = ["auc", "eer", "tpr@1%fpr", "tpr@5%fpr", "tpr@10%fpr", "tpr@20%fpr"]
        for kind in cfg.statistics:
            rows = m.metrics.get(kind)
            if not rows:
                continue
            lines += [f"### {kind}", "", "| method | AUC | EER | TPR@1%FPR | TPR@5%FPR | TPR@10%FPR | TPR@20%FPR |",
                      "|---|---|---|---|---|---|---|"]
            order = sorted(rows, key=lambda k: (k != "base", float(k.split("=")[1]) if "=" in k else 0.0))
            for name in order:
                r = rows[name]
                vals = [f"{r[head[0]]:.4f}"] + [f"{100 * r[h]:.2f}%" for h in head[1:]]
                lines.append(f"| {name} | " + " | ".join(vals) + " |")
            lines.append("")
            base = _outcome_from_csv(out / "robust" / f"armia-{kind}-base.csv", "armia")
            curves = {"base": base.roc()}
            for lam in cfg.lambda_grid:
                o = _outcome_from_csv(out / "robust" / f"armia-{kind}-lam{lam:g}.csv", "armia")
                curves[f"lambda={lam:g}"] = o.roc("ar_statistic")
            metrics.plot_curves(curves, rep / f"roc-armia-{kind}.png")
            metrics.plot_curves(curves, rep / f"roc-armia-{kind}-loglog.png", log=True)
        summary["robust"] = m.metrics

    (rep / "tables.md").write_text("\n".join(lines) + "\n")
    _write_json(rep / "metrics.json", summary)
    return summary


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memfab", description="Membership fabrication audit pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config (built-in defaults when omitted)")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--backend", choices=["exact", "fd"], default="exact")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    stage = args.command
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out = args.out
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        todo = ["train", "fabricate", "audit", "detect", "robust", "report"] if stage == "all" else [stage]
        for st in todo:
            stage = st
            if st == "train":
                cmd_train(cfg, out, args.workers)
            elif st == "fabricate":
                cmd_fabricate(cfg, out)
            elif st == "audit":
                cmd_audit(cfg, out)
            elif st == "detect":
                cmd_detect(cfg, out, args.backend)
            elif st == "robust":
                cmd_robust(cfg, out)
            elif st == "report":
                cmd_report(cfg, out)
            print(f"[{st}] done -> {out}")
    except StageError as err:
        print(str(err), file=sys.stderr)
        return 2
    except (ConfigError, MalformedRecordError, ValueError, RuntimeError, OSError) as err:
        print(f"[{stage}] {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
