"""``ruackit`` command line: gen, train, eval, attack-preview, correct, report.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import ConfigError, RunConfig, parse_config

log = logging.getLogger("ruackit")

SWEEP_DEFAULT = (1, 5, 20, 50, 100)


class UsageError(Exception):
    pass


class _StderrHandler(logging.StreamHandler):
    """Log handler bound to whatever ``sys.stderr`` is when a record is emitted."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ruackit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    _add_config_args(p)

    p = sub.add_parser("train", help="train a model on a generated benchmark")
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate a trained run on every benchmark domain")
    p.add_argument("--run", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--out", help="output directory (default: <run>/eval)")
    p.add_argument("--mc-samples", help="sample count, or a comma list for a sweep")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--maps", type=int, default=4, help="scenes per domain to render as PNG maps")
    _add_config_args(p)

    p = sub.add_parser("attack-preview", help="render adversarial style and deformation examples")
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--run", help="use attacker weights from this run")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--offset-scale", type=float, default=0.0,
                   help="add random offset logits of this scale (untrained previews)")
    _add_config_args(p)

    p = sub.add_parser("correct", help="uncertainty-guided component filtering of one mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--unc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--connectivity", type=int, default=8, choices=(4, 8))

    p = sub.add_parser("report", help="paired comparison of two evaluated runs")
    p.add_argument("baseline")
    p.add_argument("candidate")
    p.add_argument("--out")
    return ap


def _overrides(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> RunConfig:
    path = getattr(args, "config", None)
    if path is not None and not Path(path).exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path, _overrides(getattr(args, "set", [])))


# --------------------------------------------------------------------------
# commands


def cmd_gen(args):
    from .grid import save_grid, save_png
    from .synth_data import build_benchmark

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_benchmark(cfg.bench_config())
    splits = {"train": bench.train, "val": bench.val, **bench.domains}
    for name, scenes in splits.items():
        for sc in scenes:
            d = out / "scenes" / name.replace("@", "_") / str(sc.seed)
            d.mkdir(parents=True, exist_ok=True)
            save_grid(d / "image.rgrd", sc.image)
            save_png(d / "image.png", sc.image)
            for k, m in enumerate(sc.masks):
                save_grid(d / f"mask_{k}.rgrd", m)
            (d / "clicks.json").write_text(json.dumps(sc.clicks))
    (out / "manifest.json").write_text(json.dumps(bench.manifest, indent=1))
    (out / "config.ini").write_text(cfg.to_text())
    print(f"wrote {sum(len(s) for s in splits.values())} scenes to {out}")


def _load_bench(path):
    from .synth_data import benchmark_from_manifest

    mf = Path(path) / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"benchmark manifest missing: {mf} (run `ruackit gen` first)")
    return benchmark_from_manifest(json.loads(mf.read_text()))


def cmd_train(args):
    from . import trainer as T

    cfg = _config(args)
    bench = _load_bench(args.bench)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    tc = cfg.train_config()

    def progress(epoch, secs, state):
        last = state.log[-1]
        print(f"epoch {epoch:3d} phase {last['phase']} loss {last['loss']:.4f} ({secs:.1f}s)",
              flush=True)

    state = T.train(tc, bench.train, out, progress=progress)
    T.save_checkpoint(state, tc, out / "ckpt_final")
    print(f"checkpoint written to {out / 'ckpt_final'}")


def _sample_list(text, default):
    if text is None:
        return [default]
    try:
        vals = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--mc-samples expects integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise UsageError("--mc-samples values must be >= 0")
    return vals


def cmd_eval(args):
    from . import evaluate as E
    from .grid import save_png
    from .trainer import load_checkpoint

    cfg = _config(args)
    ckpt = Path(args.run) / "ckpt_final"
    params, frozen, _ = load_checkpoint(ckpt)
    bench = _load_bench(args.bench)
    domains = {"source": bench.val, **bench.domains}
    out = Path(args.out) if args.out else Path(args.run) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    samples = _sample_list(args.mc_samples, cfg.mc_samples)
    head = {k: v for k, v in params.items() if k.startswith("head.")}
    sweep = []
    for s in samples:
        rows, preds = E.evaluate(domains, head, frozen, method=Path(args.run).name, mc_samples=s,
                                 seed=cfg.eval_seed, jobs=args.jobs, patch_size=cfg.patch_size)
        for r in rows:
            r["mc_samples"] = s
        sweep.extend(rows)
        if s != samples[0]:
            continue
        (out / "metrics.csv").write_text(E.rows_to_csv(rows))
        (out / "metrics.json").write_text(json.dumps({"mc_samples": s, "rows": rows}, indent=1))
        (out / "maps").mkdir(exist_ok=True)
        for name, p in preds.items():
            safe = name.replace("@", "_")
            (out / f"risk_coverage_{safe}.csv").write_text(E.risk_coverage_csv(p))
            for i, pr in enumerate(p[:args.maps]):
                save_png(out / "maps" / f"{safe}_{i}_unc.png", pr.record.unc)
                conf = np.maximum(pr.record.pred_prob, 1 - pr.record.pred_prob)
                save_png(out / "maps" / f"{safe}_{i}_conf.png", conf)
    if len(samples) > 1:
        lines = ["mc_samples,domain,pavpu,aurc,ece,auroc"]
        for r in sweep:
            lines.append(f"{r['mc_samples']},{r['domain']},{r['pavpu']:.6f},{r['aurc']:.6f},"
                         f"{r['ece']:.6f},{r['auroc']:.6f}")
        (out / "mc_sweep.csv").write_text("\n".join(lines) + "\n")
        print(f"sweep over S={samples} written to {out / 'mc_sweep.csv'}")
    print(f"metrics written to {out}")


def cmd_attack_preview(args):
    from . import backbone, style_attack as sa, deform_attack as da, trainer as T
    from .grid import save_grid, save_png

    cfg = _config(args)
    tc = cfg.train_config()
    state = T.init_state(tc)
    if args.run:
        params, frozen, _ = T.load_checkpoint(Path(args.run) / "ckpt_final")
        state.params.update(params)
        state.frozen.update(frozen)
    bench = _load_bench(args.bench)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    bw = T.backbone_weights(state)
    weights = {**state.frozen, **state.params}
    records = []
    for sc in bench.train[:args.n]:
        feats, _ = backbone.features_and_prompts(sc.image, sc.clicks[0], bw)
        styles_src, styles_adv, objs = [], [], []
        for k, m in enumerate(sc.masks):
            src = sa.extract_object_style(sc.image, m)
            pooled = feats[:, np.asarray(m) > 0.5].mean(axis=1)
            adv = sa.bound_style(src, sa.predict_style_residual(pooled, state.params),
                                 tc.eps_style, tc.eps_style, tc.shift_eps)
            styles_src.append(src)
            styles_adv.append(adv)
            objs.append({"object": k, "mu": src.mu.tolist(), "sigma": src.sigma.tolist(),
                         "mu_adv": adv.mu.tolist(), "sigma_adv": adv.sigma.tolist()})
        styled = sa.adain_apply(sc.image, sc.masks, styles_adv, styles_src)
        eps_px = da.eps_pixels(tc.eps_deform, sc.image.shape)
        deltas = []
        for m in sc.masks:
            raw = da.predict_offsets(feats, m, weights)
            if args.offset_scale:
                raw = raw + args.offset_scale * rng.normal(size=raw.shape)
            deltas.append(da.bound_offsets(raw, eps_px).delta)
        delta = da.composite_offsets(deltas, sc.masks, eps_px)
        warped, wmasks = da.warp_pair(styled, sc.masks, delta)
        stem = out / f"scene_{sc.seed}"
        save_png(f"{stem}_before.png", sc.image)
        save_png(f"{stem}_after.png", warped)
        save_png(f"{stem}_styled.png", styled)
        save_png(f"{stem}_divergence.png", da.divergence_rgb(delta))
        save_grid(f"{stem}_offsets.rgrd", delta)
        records.append({"scene": sc.seed, "objects": objs, "max_offset_px": float(np.abs(delta).max())})
    (out / "styles.json").write_text(json.dumps(records, indent=1))
    print(f"previews for {len(records)} scenes written to {out}")


def cmd_correct(args):
    from .grid import load_grid, save_grid
    from .postproc import unc_corr

    for p in (args.mask, args.unc):
        if not Path(p).exists():
            raise FileNotFoundError(f"input grid missing: {p}")
    mask = load_grid(args.mask)
    unc = load_grid(args.unc)
    if mask.shape != unc.shape:
        raise ValueError(f"mask {mask.shape} and uncertainty {unc.shape} differ in shape")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corrected, audit = unc_corr(mask, unc, args.connectivity, audit=True)
    save_grid(out / "corrected.rgrd", corrected.astype(float))
    (out / "audit.json").write_text(json.dumps(audit, indent=1))
    kept = sum(c["kept"] for c in audit["components"])
    print(f"kept {kept}/{len(audit['components'])} components")


LOWER_IS_BETTER = {"aurc", "ece"}
REPORT_METRICS = ("JF", "JF_unccorr", "pavpu", "aurc", "ece", "auroc", "pcc")


def _read_rows(run_dir):
    import csv

    for cand in (Path(run_dir) / "eval" / "metrics.csv", Path(run_dir) / "metrics.csv"):
        if cand.exists():
            with open(cand) as fh:
                return {r["domain"]: r for r in csv.DictReader(fh)}
    raise FileNotFoundError(f"no metrics.csv under {run_dir} (run `ruackit eval` first)")


def cmd_report(args):
    a = _read_rows(args.baseline)
    b = _read_rows(args.candidate)
    domains = [d for d in a if d in b]
    ood = [d for d in domains if d != "source"]
    lines = ["domain," + ",".join(f"{m}_base,{m}_cand,{m}_delta" for m in REPORT_METRICS)]
    for d in domains:
        cells = []
        for m in REPORT_METRICS:
            x, y = float(a[d][m]), float(b[d][m])
            cells += [f"{x:.6f}", f"{y:.6f}", f"{y - x:.6f}"]
        lines.append(d + "," + ",".join(cells))
    tests = []
    for m in REPORT_METRICS:
        x = np.array([float(a[d][m]) for d in ood])
        y = np.array([float(b[d][m]) for d in ood])
        keep = np.isfinite(x) & np.isfinite(y)
        side = "less" if m in LOWER_IS_BETTER else "greater"
        try:
            w, p = M.wilcoxon_signed_rank(y[keep], x[keep], side)
        except M.UndefinedMetricError:
            w, p = float("nan"), float("nan")
        tests.append({"metric": m, "side": side, "n": int(keep.sum()), "W+": w, "p": p,
                      "wins": int(np.sum((y < x) if side == "less" else (y > x)))})
    text = "\n".join(lines) + "\n"
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(text)
        (out / "report.json").write_text(json.dumps({"domains": domains, "tests": tests}, indent=1))
    print(text, end="")
    for t in tests:
        print(f"{t['metric']:>10s}: candidate better on {t['wins']}/{t['n']} OOD domains, "
              f"one-sided Wilcoxon p = {t['p']:.4g}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "attack-preview": cmd_attack_preview, "correct": cmd_correct, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ruackit: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", handlers=[_StderrHandler()])
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"ruackit: usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"ruackit: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
