"""Command line interface.

Experiment subcommands emit delimited data (CSV/JSONL) and binary archives;
the ``report`` subcommand renders matplotlib figures from those files into
the same output directory. ``generate --figures`` additionally renders the
map it just produced.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .archive import load_archive, save_archive
from .classifier import HalfScorer, Scorer
from .experiments import (
    ImageSource,
    PrecisionPlan,
    SweepSpec,
    desk_corpus,
    fp16_ab,
    guarantee_convergence_study,
    rank_sigma,
    run_sweep,
    sigma_matching,
    write_rows_csv,
)
from .geometry import InspectedArea
from .gridgen import GeneratorKind
from .metrics import alteration_game, consistency, pointing_game
from .saliency import ParamSet, generate_map
from .wire import RemoteScorer, serve_scorer


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _area(text: str) -> InspectedArea:
    w, _, h = text.lower().partition("x")
    return InspectedArea(width=int(w), height=int(h))


def _rects(text: str) -> tuple[tuple[int, int, int, int], ...]:
    out = []
    for part in text.split("+"):
        vals = tuple(int(v) for v in part.split(","))
        if len(vals) != 4:
            raise ValueError(f"a rectangle needs x0,y0,x1,y1 - got {part!r}")
        out.append(vals)
    return tuple(out)


def parse_image(text: str) -> ImageSource:
    """Image spec: ``oracle:<WxH>:<x0,y0,x1,y1>[+more]`` with an optional
    ``:classes=K`` suffix, or a path to an image file."""
    if text.startswith("oracle:"):
        parts = text.split(":")
        if len(parts) < 3:
            raise ValueError(f"oracle spec needs oracle:<WxH>:<rects>, got {text!r}")
        area = _area(parts[1])
        rects = _rects(parts[2])
        classes = 3
        for extra in parts[3:]:
            key, _, value = extra.partition("=")
            if key == "classes":
                classes = int(value)
            else:
                raise ValueError(f"unknown oracle option {extra!r}")
        return ImageSource(
            image_id=f"oracle-{parts[1]}-{parts[2]}",
            size=(area.width, area.height),
            rects=rects,
            num_classes=classes,
        )
    path = Path(text)
    if not path.exists():
        raise ValueError(f"image file {text!r} does not exist")
    return ImageSource(image_id=path.stem, kind="file", path=str(path))


def parse_images(text: str) -> list[ImageSource]:
    if text == "desk":
        return desk_corpus()
    return [parse_image(part) for part in text.split(";") if part.strip()]


def make_scorer(spec: str, image: "ImageSource | None" = None) -> "Scorer | None":
    """--scorer values: ``oracle`` (per-image) or ``remote:<host>:<port>``."""
    if spec == "oracle":
        if image is None:
            return None  # sweep-style commands build per-image oracles
        scorer = image.make_scorer()
        if scorer is None:
            raise ValueError(f"image {image.image_id} has no oracle; use remote:")
        return scorer
    if spec.startswith("remote:"):
        return RemoteScorer.parse(spec.removeprefix("remote:"))
    raise ValueError(f"scorer must be 'oracle' or 'remote:<host>:<port>', got {spec!r}")


def _class_ids(args: argparse.Namespace, src: ImageSource) -> "list[int] | None":
    if getattr(args, "class_id", None) is not None:
        return [args.class_id]
    return [0] if src.kind == "oracle" else None


def _add_paramset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algorithm", choices=("vrise", "rise"), default="vrise")
    p.add_argument("--n-masks", type=int, default=1000)
    p.add_argument("--polygons", type=int, default=49)
    p.add_argument("--p1", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=9.0)
    p.add_argument("--meshcount", type=int, default=1)
    p.add_argument("--selector", type=GeneratorKind.parse, default=GeneratorKind.threshold())
    p.add_argument("--seed", type=int, default=0)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scorer", default="oracle")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", type=Path, default=Path("results"))


def cmd_generate(args: argparse.Namespace) -> int:
    src = parse_image(args.image)
    image = src.load()
    scorer = make_scorer(args.scorer, src)
    plan: PrecisionPlan = args.precision
    params = ParamSet(
        n_masks=args.n_masks,
        polygons=args.polygons,
        p1=args.p1,
        master_seed=args.seed,
        algorithm=args.algorithm,
        sigma=args.sigma,
        meshcount=args.meshcount,
        selector=args.selector,
    )
    gen_scorer = HalfScorer(scorer) if plan.generation == "fp16" else scorer
    run = generate_map(
        image,
        params,
        gen_scorer,
        class_ids=_class_ids(args, src),
        checkpoint_schedule=list(args.checkpoints) if args.checkpoints else None,
        workers=args.workers,
        batch_size=args.batch_size,
    )
    final = run.primary()
    out = args.out
    (out / "archives").mkdir(parents=True, exist_ok=True)
    dtype = "f16" if plan.storage == "fp16" else "f32"
    arch = out / "archives" / f"map_{params.digest()}.vrse"
    save_archive(arch, final.values, metadata=final.metadata(), dtype=dtype)
    for ckpt in run.checkpoints[final.class_id]:
        save_archive(
            out / "archives" / f"map_{params.digest()}_ckpt{ckpt.masks_used}.vrse",
            ckpt.values,
            metadata=ckpt.metadata(),
            dtype=dtype,
        )
    summary = {
        "archive": str(arch),
        "class_id": final.class_id,
        "masks": final.masks_used,
        "value_min": float(final.values.min()),
        "value_max": float(final.values.max()),
        "precision": plan.tag(),
        "params": params.describe(),
    }
    with open(out / "map_summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    if args.figures:
        from .report import render_map_overlay

        (out / "figures").mkdir(parents=True, exist_ok=True)
        render_map_overlay(
            image,
            final.values,
            out / "figures" / f"map_{params.digest()}.png",
            title=f"class {final.class_id}, {final.masks_used} masks",
        )
    print(f"map {params.digest()} class={final.class_id} masks={final.masks_used} -> {arch}")
    return 0


def cmd_altgame(args: argparse.Namespace) -> int:
    src = parse_image(args.image)
    image = src.load()
    scorer = make_scorer(args.scorer, src)
    if args.precision.game == "fp16":
        scorer = HalfScorer(scorer)
    loaded = load_archive(args.map)
    saliency = loaded.values[0]
    class_id = args.class_id
    if class_id is None:
        class_id = int(loaded.metadata.get("class_id", 0))
    curve = alteration_game(
        image,
        saliency,
        scorer,
        class_id,
        args.variant,
        step=args.step or image.shape[1],
        substrate_sigma=args.substrate_sigma,
        batch_size=args.batch_size,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    target = args.out / f"altgame_{args.variant}.csv"
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["state", "pixels_altered", "score"])
        for i, score in enumerate(curve.scores):
            writer.writerow([i, min(i * curve.step, saliency.size), float(score)])
    print(f"{args.variant} auc={curve.auc:.6f} states={len(curve.scores)} -> {target}")
    return 0


def cmd_pointing(args: argparse.Namespace) -> int:
    src = parse_image(args.image)
    loaded = load_archive(args.map)
    boxes = _rects(args.boxes) if args.boxes else tuple(src.target_boxes())
    if not boxes:
        print("no target boxes: pass --boxes or use an oracle image", file=sys.stderr)
        return 2
    hit = pointing_game(loaded.values[0], list(boxes))
    print(f"pointing {'hit' if hit else 'miss'}")
    return 0


def cmd_consistency(args: argparse.Namespace) -> int:
    maps: list[np.ndarray] = []
    for path in args.maps:
        loaded = load_archive(path)
        maps.extend(loaded.values[i] for i in range(loaded.count))
    values = consistency(maps)
    args.out.mkdir(parents=True, exist_ok=True)
    target = args.out / "consistency.csv"
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["pair_a", "pair_b", "ssim"])
        k = 0
        for i in range(len(maps)):
            for j in range(i + 1, len(maps)):
                writer.writerow([i, j, float(values[k])])
                k += 1
    print(
        f"pairs={len(values)} mean={values.mean():.6f} "
        f"min={values.min():.6f} max={values.max():.6f} -> {target}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    images = parse_images(args.images)
    spec = SweepSpec(
        polygons_values=args.polygons,
        p1_values=args.p1_values,
        sigma_values=args.sigmas,
        meshcount_values=args.meshcounts,
        n_masks=args.n_masks,
        runs=args.runs,
        algorithm=args.algorithm,
        selector=args.selector,
        master_seed=args.seed,
        metrics=tuple(args.metrics.split(",")),
        step=args.step,
        substrate_sigma=args.substrate_sigma,
        checkpoint_schedule=args.checkpoints or (),
        precision=args.precision,
        with_reference=args.with_reference,
    )
    scorer = None if args.scorer == "oracle" else make_scorer(args.scorer)
    rows = run_sweep(
        spec,
        images,
        args.out,
        scorer=scorer,
        workers=args.workers,
        batch_size=args.batch_size,
    )
    errors = sum(1 for r in rows if "error" in r)
    print(f"rows={len(rows)} errors={errors} -> {args.out / 'results.csv'}")
    return 0


def cmd_sigma_match(args: argparse.Namespace) -> int:
    rows = sigma_matching(
        sides=args.sides,
        sigmas=args.sigmas,
        p1_values=args.p1_values,
        samples=args.samples,
        area=args.area,
        master_seed=args.seed,
    )
    ranking = rank_sigma(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, args.out / "sigma_match.csv")
    write_rows_csv(ranking, args.out / "sigma_match_ranking.csv")
    for r in ranking:
        if r["rank"] == 1:
            print(
                f"side={r['side']} best sigma={r['sigma']:g} "
                f"mean_ssim={r['mean_ssim']:.4f} top1_share={r['top1_share']:.2f}"
            )
    for r in ranking:
        if r["is_published_pair"]:
            print(
                f"side={r['side']} published sigma={r['sigma']:g} observed rank={r['rank']}"
            )
    print(f"-> {args.out / 'sigma_match_ranking.csv'}")
    return 0


def cmd_fp16_ab(args: argparse.Namespace) -> int:
    images = parse_images(args.images)
    scorer = None if args.scorer == "oracle" else make_scorer(args.scorer)
    rows, summaries = fp16_ab(
        images,
        polygons=args.polygons,
        p1=args.p1,
        sigma=args.sigma,
        meshcount=args.meshcount,
        n_masks=args.n_masks,
        runs=args.runs,
        algorithm=args.algorithm,
        selector=args.selector,
        variants=tuple(args.variants.split(",")),
        step=args.step,
        master_seed=args.seed,
        scorer=scorer,
        workers=args.workers,
        tolerance=args.tolerance,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, args.out / "fp16_ab.csv")
    write_rows_csv(summaries, args.out / "fp16_ab_summary.csv")
    for s in summaries:
        print(
            f"{s['combo']}: mean={s['rel_delta_mean']:+.4f} "
            f"range=[{s['rel_delta_min']:+.4f}, {s['rel_delta_max']:+.4f}] "
            f"within {s['tolerance']:.0%}: {s['share_within_tolerance']:.0%}"
        )
    print(f"-> {args.out / 'fp16_ab_summary.csv'}")
    return 0


def cmd_gridgen_study(args: argparse.Namespace) -> int:
    src = parse_image(args.image) if args.image else None
    scorer = None if args.scorer == "oracle" else make_scorer(args.scorer)
    rows = guarantee_convergence_study(
        image_source=src,
        side=args.side,
        p1=args.p1,
        n_schedule=args.schedule,
        m_maps=args.maps,
        n_reference=args.n_reference,
        algorithm=args.algorithm,
        sigma=args.sigma,
        meshcount=args.meshcount,
        master_seed=args.seed,
        scorer=scorer,
        workers=args.workers,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, args.out / "guarantee.csv")
    for r in rows:
        if r["group"] == "difference":
            print(
                f"n={r['n_masks']}: guaranteed-baseline "
                f"ssim_to_reference={r['ssim_to_reference']:+.4f} "
                f"intra_consistency={r['intra_consistency']:+.4f}"
            )
    print(f"-> {args.out / 'guarantee.csv'}")
    return 0


def cmd_serve_oracle(args: argparse.Namespace) -> int:
    src = ImageSource(
        image_id="served-oracle",
        size=(args.area.width, args.area.height),
        rects=_rects(args.rects),
        num_classes=args.classes,
    )
    scorer = src.make_scorer()
    host, _, port = args.listen.rpartition(":")
    server = serve_scorer(scorer, host=host or "127.0.0.1", port=int(port), batch_cap=args.batch_cap)
    print(f"serving oracle (classes={args.classes}) on {server.address}", flush=True)
    try:
        import threading

        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .report import render_report

    made = render_report(args.out)
    if not made:
        print(f"no renderable results found in {args.out}", file=sys.stderr)
        return 1
    for path in made:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vrise",
        description="Occlusion-based saliency attribution and its evaluation suite.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a saliency map archive")
    p.add_argument("--image", required=True)
    _add_paramset_flags(p)
    _add_common_flags(p)
    p.add_argument("--class-id", type=int, default=None)
    p.add_argument("--checkpoints", type=_ints, default=())
    p.add_argument("--precision", type=PrecisionPlan.parse, default=PrecisionPlan())
    p.add_argument("--figures", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("altgame", help="play one alteration game on a stored map")
    p.add_argument("--map", required=True, type=Path)
    p.add_argument("--image", required=True)
    p.add_argument("--variant", required=True, choices=("insert", "sharpen", "remove", "blur"))
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--substrate-sigma", type=float, default=9.0)
    p.add_argument("--class-id", type=int, default=None)
    p.add_argument("--precision", type=PrecisionPlan.parse, default=PrecisionPlan())
    _add_common_flags(p)
    p.set_defaults(fn=cmd_altgame)

    p = sub.add_parser("pointing", help="pointing game on a stored map")
    p.add_argument("--map", required=True, type=Path)
    p.add_argument("--image", required=True)
    p.add_argument("--boxes", default=None)
    p.set_defaults(fn=cmd_pointing)

    p = sub.add_parser("consistency", help="pairwise SSIM of stored maps")
    p.add_argument("--maps", required=True, nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.set_defaults(fn=cmd_consistency)

    p = sub.add_parser("sweep", help="cartesian parameter sweep with journaling")
    p.add_argument("--images", default="desk")
    p.add_argument("--polygons", type=_ints, default=(16, 49))
    p.add_argument("--p1-values", type=_floats, default=(0.25, 0.5))
    p.add_argument("--sigmas", type=_floats, default=(9.0,))
    p.add_argument("--meshcounts", type=_ints, default=(1,))
    p.add_argument("--n-masks", type=int, default=500)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--algorithm", choices=("vrise", "rise"), default="vrise")
    p.add_argument("--selector", type=GeneratorKind.parse, default=GeneratorKind.threshold())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", default="altgame_remove,altgame_insert,pointing")
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--substrate-sigma", type=float, default=9.0)
    p.add_argument("--checkpoints", type=_ints, default=())
    p.add_argument("--precision", type=PrecisionPlan.parse, default=PrecisionPlan())
    p.add_argument("--with-reference", action="store_true")
    p.add_argument("--scorer", default="oracle")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("sigma-match", help="match mesh blur strength to grid masks")
    p.add_argument("--sides", type=_ints, default=(4, 5, 7, 9))
    p.add_argument("--sigmas", type=_floats, default=(0.1, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0))
    p.add_argument("--p1-values", type=_floats, default=(0.25, 0.5, 0.75))
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--area", type=_area, default=InspectedArea(224, 224))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.set_defaults(fn=cmd_sigma_match)

    p = sub.add_parser("fp16-ab", help="A/B half-precision pipeline stages")
    p.add_argument("--images", default="desk")
    p.add_argument("--variants", default="insert,remove")
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--runs", type=int, default=2)
    p.add_argument("--step", type=int, default=None)
    _add_paramset_flags(p)
    _add_common_flags(p)
    p.set_defaults(fn=cmd_fp16_ab)

    p = sub.add_parser("gridgen-study", help="informativeness guarantee vs convergence")
    p.add_argument("--image", default=None)
    p.add_argument("--side", type=int, default=3)
    p.add_argument("--p1", type=float, default=0.1)
    p.add_argument("--schedule", type=_ints, default=(100, 250, 500, 1000, 2000))
    p.add_argument("--maps", type=int, default=3)
    p.add_argument("--n-reference", type=int, default=3000)
    p.add_argument("--algorithm", choices=("vrise", "rise"), default="rise")
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--meshcount", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scorer", default="oracle")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.set_defaults(fn=cmd_gridgen_study)

    p = sub.add_parser("serve-oracle", help="serve a region oracle over the wire protocol")
    p.add_argument("--rects", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--area", type=_area, default=InspectedArea(64, 64))
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--batch-cap", type=int, default=4096)
    p.set_defaults(fn=cmd_serve_oracle)

    p = sub.add_parser("report", help="render figures from a results directory")
    p.add_argument("--out", type=Path, default=Path("results"))
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: "list[str] | None" = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
