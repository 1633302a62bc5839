"""Command-line entry point: synth, preprocess, train, infer, evaluate."""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

log = logging.getLogger("lstfusion")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {text!r}") from None


def _load_checked_manifest(path):
    from .dataset import check_leakage, load_manifest, validate_constraints

    m = load_manifest(path)
    rep = validate_constraints(m, check_files=True, check_rasters=True)
    leak = check_leakage(m)
    print(rep, file=sys.stderr)
    print(leak, file=sys.stderr)
    if not rep.ok or not leak.ok:
        raise ValueError(f"manifest {path} failed validation")
    return m


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args) -> None:
    from .synthscene import SynthConfig, write_dataset

    cfg = SynthConfig(seed=args.seed, size=args.size)
    path = write_dataset(args.out, cfg, n_train=args.n_train, n_test=args.n_test)
    print(path)


def cmd_preprocess(args) -> None:
    from .dataset import build_patchset

    m = _load_checked_manifest(args.manifest)
    out = Path(args.out)
    for split in ("train", "test"):
        entries = m.split(split)
        if not entries or any("mid_lst_t2" not in e.paths for e in entries):
            log.info("skipping %s patches (no samples or no target mid LST)", split)
            continue
        ps = build_patchset(m, split, args.patch_size, args.stride)
        ps.save(out / f"{split}_patches")
        log.info("%s: %d patches from %d samples", split, len(ps), len(entries))
    print(out)


def _plot_losses(trace, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .training import moving_average

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, (name, vals) in zip(axes, (("generator", trace.loss_g), ("discriminator", trace.loss_d))):
        ax.plot(trace.step, vals, lw=0.6, alpha=0.4, label="per step")
        ma = moving_average(vals)
        ax.plot(trace.step[len(trace.step) - len(ma) :], ma, lw=1.5, label="moving average")
        ax.set_title(f"{name} loss")
        ax.set_xlabel("step")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def cmd_train(args) -> None:
    import torch

    from .dataset import PatchSet, build_patchset
    from .discriminator import DiscriminatorConfig
    from .generator import GeneratorConfig
    from .training import LossWeights, TrainConfig, train

    torch.set_num_threads(1)
    if args.patches:
        ps = PatchSet.load(args.patches, mmap=False)
    elif args.manifest:
        m = _load_checked_manifest(args.manifest)
        ps = build_patchset(m, "train")
    else:
        raise ValueError("train needs --manifest or --patches")
    gkw = {"res_blocks": args.res_blocks}
    if args.channels:
        gkw.update(levels=len(args.channels), channels=args.channels)
    gcfg = GeneratorConfig(base_size=ps.fine_size, **gkw)
    dcfg = DiscriminatorConfig(channels=args.disc_channels) if args.disc_channels else DiscriminatorConfig()
    tcfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        steps=args.steps,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        out_dir=args.out,
    )
    res = train(ps, gcfg, dcfg, tcfg, LossWeights.parse(args.loss_weights))
    _plot_losses(res.trace, Path(args.out) / "loss_curve.png")
    print(res.checkpoints[-1])


def _save_colormap(values: np.ndarray, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lo, hi = np.percentile(values, [1, 99])
    plt.imsave(path, values, cmap="inferno", vmin=lo, vmax=hi, metadata={"Software": None})


def prediction_path(pred_dir: Path, entry) -> Path:
    return Path(pred_dir) / f"{entry.id}_{entry.t2.isoformat()}_lst.tif"


def cmd_infer(args) -> None:
    import torch

    from .dataset import LSTScaler, load_manifest, load_sample
    from .geoio import write_geotiff
    from .inference import infer_scene
    from .training import load_checkpoint

    torch.set_num_threads(1)
    ck = load_checkpoint(args.checkpoint)
    m = load_manifest(args.manifest)
    if (m.lo_k, m.hi_k) != (ck.lo_k, ck.hi_k):
        log.warning("manifest normalisation differs from the checkpoint's; using the checkpoint's")
    scaler = LSTScaler(ck.lo_k, ck.hi_k)
    if args.date:
        entries = [e for e in m.samples if e.t2 == args.date]
        if not entries:
            raise ValueError(f"no sample in {args.manifest} has target date {args.date}")
    else:
        entries = m.split(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e in entries:
        pred = infer_scene(ck.generator, load_sample(m, e), scaler, stride=args.stride)
        tif = prediction_path(out, e)
        write_geotiff(tif, pred)
        _save_colormap(pred.values[0], tif.with_suffix(".png"))
        log.info("%s -> %s", e.id, tif)
        print(tif)


def sensor_table(sensors_csv, predictions: list[tuple], acquisition_clock: list[str | None]):
    """Pair each sensor's readings with fused LST at its location -> rows and per-sensor series."""
    from pyproj import Transformer

    from .metrics import KELVIN_OFFSET, SensorSeries, rank_correlations, read_sensor_csv

    readings = read_sensor_csv(sensors_csv)
    rows, skipped = {}, []
    for sid, obs in readings.items():
        lat, lon = obs[0][0], obs[0][1]
        series = SensorSeries(sid, lat, lon)
        for (entry, raster), clock in zip(predictions, acquisition_clock):
            g = raster.grid
            x, y = Transformer.from_crs("EPSG:4326", g.crs_id, always_xy=True).transform(lon, lat)
            col = int(np.floor((x - g.origin_x) / g.pixel_size))
            row = int(np.floor((g.origin_y - y) / g.pixel_size))
            same_day = [o for o in obs if o[2].date() == entry.t2]
            if not (0 <= row < g.height and 0 <= col < g.width) or not same_day:
                continue
            hh, mm = (int(v) for v in (clock or "12:00").split(":"))
            target = dt.datetime.combine(entry.t2, dt.time(hh, mm))
            best = min(same_day, key=lambda o: abs((o[2].replace(tzinfo=None) - target).total_seconds()))
            series.timestamps.append(best[2])
            series.t_a.append(best[3])
            series.lst.append(float(raster.values[0, row, col]) - KELVIN_OFFSET)
        try:
            rows[sid] = rank_correlations(series)
        except ValueError as exc:
            skipped.append(str(exc))
    return rows, skipped


def cmd_evaluate(args) -> None:
    from .dataset import load_manifest, load_sample
    from .geoio import read_geotiff
    from .inference import bicubic_baseline
    from .metrics import MetricsReport, evaluate_against_reference, rmse

    m = load_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    report = MetricsReport()
    truth_rmse: dict[str, dict[str, float]] = {}
    predictions, clocks = [], []
    for e in m.samples:
        p = prediction_path(pred_dir, e)
        if not p.exists():
            continue
        pred = read_geotiff(p)
        predictions.append((e, pred))
        clocks.append(e.acquisition.get("t2", {}).get("coarse"))
        s = load_sample(m, e)
        if s.t2_lst_mid is None:
            continue
        label = e.t2.isoformat()
        if label in report.rows:
            label = f"{label} ({e.id})"
        base = bicubic_baseline(s)
        report.add(label, "Fused", evaluate_against_reference(pred, s.t2_lst_mid))
        report.add(label, "BicubicI", evaluate_against_reference(base, s.t2_lst_mid))
        if s.t2_lst_fine_truth is not None:
            truth_rmse[label] = {"Fused": rmse(pred, s.t2_lst_fine_truth), "BicubicI": rmse(base, s.t2_lst_fine_truth)}
    if not predictions:
        raise ValueError(f"no predictions for manifest samples found in {pred_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if truth_rmse:
        report.meta["fine_truth_rmse_k"] = truth_rmse
    if report.rows:
        report.save_json(out / "metrics.json")
        table = report.table()
        (out / "metrics.txt").write_text(table)
        print(table)
    else:
        log.warning("no sample carries a mid-resolution target; metrics table skipped")
    if args.sensors_csv:
        rows, skipped = sensor_table(args.sensors_csv, predictions, clocks)
        for msg in skipped:
            log.warning("sensor skipped, %s", msg)
        (out / "sensors.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
        lines = [f"{'Sensor':<12}{'PCC':>8}{'SRCC':>8}"]
        lines += [f"{sid:<12}{v['pcc']:>8.2f}{v['srcc']:>8.2f}" for sid, v in sorted(rows.items())]
        (out / "sensors.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lstfusion", description="Weakly supervised 10 m LST fusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset with manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=288, help="fine scene side in pixels")
    s.add_argument("--n-train", type=int, default=8)
    s.add_argument("--n-test", type=int, default=2)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="validate a manifest and cut patch archives")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="unused; accepted for a uniform interface")
    s.add_argument("--patch-size", type=int, default=96)
    s.add_argument("--stride", type=int, default=24)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train generator and critic")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--patches", help="patch archive written by preprocess")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=2e-4)
    s.add_argument("--loss-weights", default="1,100,1,1", help="alpha,beta,gamma,delta")
    s.add_argument("--channels", type=_ints, help="generator widths per level, e.g. 8,8,16,16,32")
    s.add_argument("--res-blocks", type=int, default=2)
    s.add_argument("--disc-channels", type=_ints, help="critic widths, e.g. 64,128,256,512")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict fine LST for whole scenes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--date", type=_date, help="only samples with this target date")
    s.add_argument("--split", default="test", help="samples to predict when --date is absent")
    s.add_argument("--stride", type=int, default=48)
    s.add_argument("--seed", type=int, default=0, help="unused; inference is deterministic")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="metrics tables against mid-resolution references")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sensors-csv", help="sensor_id,lat,lon,timestamp_iso8601,t_a_celsius")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except (FileNotFoundError, ValueError, jsonschema.ValidationError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
