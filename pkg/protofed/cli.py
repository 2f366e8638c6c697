"""Command-line entry point: ``protofed partition|train|gradcheck|inspect|report``.

Exit status is 0 on success, 1 for invalid configuration or data and 2 for
any other failure, including a failed gradient check.
"""
import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .Federation import (CHECKPOINT_DIR, CONFIG_NAME, GlobalState, compare_variants,
                         load_run_summary, run_federation, write_comparison)
from .General import init, wrapper_version
from .Interpret import (cross_client_agreement, explain, iou, localization_rate,
                        localization_study, mean_off_diagonal,
                        top_class_activation, write_explanation,
                        write_localization)
from .Loss import local_loss
from .Model import AdapterModule, adapter_forward, init_params, load_params, model_forward
from .RunSettings import LossWeights, RunConfig, tiny_config
from .SiteData import TEST_SITE, build_sites, generate_site, site_specs, write_site
from .Tensor import (Tensor, conv2d, grad_check, linear, maxpool2d, reduce_sum, relu,
                     set_precision, sliding_sq_l2)
from .image_utils import load_pnm
from .protofed_aux import (ConfigurationError, DataError, GradCheckReport,
                           ProtoFedException)
from .protofed_types import DEFAULT_VARIANT_GRID
import protofed.protofed_types as internal

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2

GRADCHECK_STEP = 1e-6
GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_SEEDS = 20
GRADCHECK_ATOL = 0.0


def _parse_variants(text: str) -> list:
    if text == "default":
        return list(DEFAULT_VARIANT_GRID)
    try:
        return [internal.__StrVariant__[v.strip()] for v in text.split(",")
                if v.strip()]
    except KeyError as e:
        raise ConfigurationError(f"unknown variant {e.args[0]!r}") from e


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File values, then the variant preset, then ``--set`` overrides, then
    dedicated flags.

    The variant comes from the highest-precedence source that names it, and
    its preset is applied before any override so explicit values win.
    """
    config = RunConfig.load(args.config)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    flags = {
        "federation.rounds": getattr(args, "rounds", None),
        "worker.workers": getattr(args, "workers", None),
        "federation.seed": args.seed,
        "data.seed": args.seed,
        "run.output_dir": args.output_dir,
        "run.variant": getattr(args, "variant", None),
        "federation.dump_payloads": "true" if getattr(args, "dump_payloads",
                                                      False) else None,
    }
    overrides.update({k: str(v) for k, v in flags.items() if v is not None})
    variant = config.run.variant
    if "run.variant" in overrides:
        variant = config.override(
            {"run.variant": overrides["run.variant"]}).run.variant
    config = config.with_variant(variant)
    if overrides:
        config = config.override(overrides)
    return config.validate()


def _prepare_output(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigurationError(
            f"output directory {path} is not empty, use --force to reuse it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_partition(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _prepare_output(Path(config.run.output_dir), args.force)
    config.save(out / CONFIG_NAME)
    backbone = config.backbone
    for name, spec in site_specs(config.data).items():
        dataset = generate_site(spec, tuple(backbone.image_size),
                                backbone.num_classes, backbone.in_channels,
                                config.data.glyph_size)
        write_site(dataset, out / name, name)
        logger.info("wrote site %s: %d samples", name, len(dataset))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(config.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_sites(config)
    if args.variants:
        table = compare_variants(config, data, _parse_variants(args.variants), out)
        for row in table:
            print(f"{row.variant}: avg test acc {row.average:.4f}, payload "
                  f"ratio {row.payload_ratio:.4f}")
        return EXIT_OK
    report = run_federation(config, data, out)
    if config.interpret.max_images > 0:
        params = report.clients[0].params
        results = localization_study(params, config.backbone, data.test,
                                     config.interpret.percentile,
                                     config.interpret.max_images)
        write_localization(results, out / "localization.csv")
        logger.info("localization: %.3f of %d images with IoU >= 0.3",
                    localization_rate(results), len(results))
    print(f"final test accuracy per client: "
          f"{[round(a, 4) for a in report.final_test_accuracy()]}")
    print(f"payload {report.payload_bytes} B / checkpoint "
          f"{report.checkpoint_bytes} B = {report.payload_ratio:.4f}")
    return EXIT_OK


def gradcheck_suite(seed: int, tolerance: float = GRADCHECK_TOLERANCE,
                    atol: float = GRADCHECK_ATOL, step: float = GRADCHECK_STEP
                    ) -> dict:
    """Finite-difference checks of every primitive and of the full local
    loss on the two-block toy model, all at double precision."""
    set_precision("double")
    rng = np.random.default_rng(seed)
    reports = {}

    def check(name, fn, point):
        reports[name] = grad_check(fn, point, step=step, tolerance=tolerance,
                                     atol=atol)

    r = np.random.default_rng(seed + 1)
    conv_point = {"input": Tensor(rng.standard_normal((2, 2, 5, 5))),
                  "kernel": Tensor(rng.standard_normal((3, 2, 3, 3))),
                  "bias": Tensor(rng.standard_normal(3))}
    w_conv = r.standard_normal((2, 3, 5, 5))
    check("conv2d", lambda p: reduce_sum(conv2d(p["input"], p["kernel"], p["bias"],
                                             stride=1, padding=1) * w_conv),
          conv_point)
    w_strided = r.standard_normal((2, 3, 2, 2))
    check("conv2d_stride2", lambda p: reduce_sum(conv2d(
        p["input"], p["kernel"], p["bias"], stride=2, padding=0) * w_strided),
        {k: Tensor(v.data) for k, v in conv_point.items()})
    w_relu = r.standard_normal((2, 3, 4, 4))
    check("relu", lambda p: reduce_sum(relu(p["input"]) * w_relu),
          {"input": Tensor(rng.standard_normal((2, 3, 4, 4)))})
    w_pool = r.standard_normal((2, 3, 2, 2))
    check("maxpool2d", lambda p: reduce_sum(maxpool2d(p["input"], 2, 2) * w_pool),
          {"input": Tensor(rng.standard_normal((2, 3, 4, 4)))})
    w_lin = r.standard_normal((3, 2))
    check("linear", lambda p: reduce_sum(linear(p["input"], p["weights"]) * w_lin),
          {"input": Tensor(rng.standard_normal((3, 4))),
           "weights": Tensor(rng.standard_normal((4, 2)))})
    w_l2 = r.standard_normal((2, 3, 3, 3))
    check("sliding_sq_l2", lambda p: reduce_sum(sliding_sq_l2(p["feature"],
                                                           p["template"]) * w_l2),
          {"feature": Tensor(rng.standard_normal((2, 4, 4, 4))),
           "template": Tensor(rng.standard_normal((3, 4, 2, 2)))})
    w_adapter = r.standard_normal((1, 8, 4, 4))
    check("adapter_forward", lambda p: reduce_sum(adapter_forward(
        p["h"], AdapterModule(p["down"], p["up"])) * w_adapter),
        {"h": Tensor(rng.standard_normal((1, 8, 4, 4))),
         "down": Tensor(rng.standard_normal((2, 8, 1, 1))),
         "up": Tensor(rng.standard_normal((8, 2, 1, 1)))})

    config = tiny_config(seed)
    backbone = config.backbone
    params = init_params(backbone, seed)
    for t in list(params.alpha.values()) + list(params.phi.values()):
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    reference = GlobalState(
        {n: t.data + 0.1 * rng.standard_normal(t.shape)
         for n, t in params.alpha.items()},
        {n: t.data + 0.1 * rng.standard_normal(t.shape)
         for n, t in params.phi.items()})
    images = rng.uniform(0.0, 1.0, size=(4, backbone.in_channels)
                         + tuple(backbone.image_size))
    labels = np.array([0, 1, 0, 1])
    weights = LossWeights(beta=0.1, lambda_clst=0.8, lambda_sep=0.08,
                          gamma=0.1, mu1=0.1, mu2=0.1)
    layer = params.prototype_layer(backbone)
    point = {**params.alpha, **params.phi}

    def composite(p):
        return local_loss(model_forward(images, params, backbone), labels,
                          params, layer, weights, reference).total
    check("local_loss", composite, point)
    return reports


def _print_report(name: str, report: GradCheckReport) -> None:
    print(f"{name:20s} max rel. error {report.max_relative_error:.3e} "
          f"{'pass' if report.passed else 'FAIL'}")
    for c in report.failures():
        print(f"    {c.name}{list(c.worst_index)}: analytic {c.analytic:.10g}, "
              f"numeric {c.numeric:.10g}, rel. error {c.max_relative_error:.3e}")


def cmd_gradcheck(args: argparse.Namespace) -> int:
    passed = True
    for seed in range(args.seed or 0, (args.seed or 0) + args.seeds):
        for name, report in gradcheck_suite(seed, args.tolerance,
                                            args.atol).items():
            _print_report(f"[{seed}] {name}", report)
            passed &= report.passed
    print("gradcheck passed" if passed else "gradcheck FAILED")
    return EXIT_OK if passed else EXIT_FAILURE


def _load_clients(args: argparse.Namespace, config: RunConfig) -> list:
    paths = [Path(p) for p in args.checkpoint or []]
    if args.run_dir:
        paths += sorted((Path(args.run_dir) / CHECKPOINT_DIR).glob("client*.ckpt"),
                        key=lambda p: int(p.stem[len("client"):]))
    if not paths:
        raise ConfigurationError("inspect needs --checkpoint or --run-dir")
    return [load_params(p, config.backbone) for p in paths]


def cmd_inspect(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    clients = _load_clients(args, config)
    out = Path(config.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = config.backbone
    top_k = args.top_k or config.interpret.top_k
    percentile = config.interpret.percentile

    if args.images:
        images = [(Path(p).stem, load_pnm(p), None, None) for p in args.images]
    else:
        spec = site_specs(config.data)[TEST_SITE]
        test = generate_site(spec, tuple(backbone.image_size),
                             backbone.num_classes, backbone.in_channels,
                             config.data.glyph_size)
        images = [(f"test{i:05d}", test.images[i], test.boxes[i], int(test.labels[i]))
                  for i in test.diseased[:config.interpret.max_images]]

    summary = []
    for stem, image, truth, label in images:
        for c, params in enumerate(clients):
            activations = explain(image, params, backbone, top_k, percentile)
            write_explanation(image, activations, out / f"client{c + 1}", stem)
        row = [stem]
        if truth is not None:
            row += [format(iou(top_class_activation(image, p, backbone, label,
                                                    percentile).box, truth),
                           ".10g") for p in clients]
        if len(clients) > 1:
            matrix = cross_client_agreement(image, clients, backbone, percentile)
            with open(out / f"{stem}_agreement.csv", "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow([""] + [f"client{i + 1}" for i in range(len(clients))])
                for i, values in enumerate(matrix):
                    writer.writerow([f"client{i + 1}"]
                                    + [format(v, ".10g") for v in values])
            row.append(format(mean_off_diagonal(matrix), ".10g"))
        summary.append(row)

    with open(out / "iou_summary.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        header = ["image"]
        if images and images[0][2] is not None:
            header += [f"client{i + 1}_iou" for i in range(len(clients))]
        if len(clients) > 1:
            header.append("mean_agreement")
        writer.writerow(header)
        writer.writerows(summary)
    logger.info("inspected %d image(s) with %d client model(s)", len(images),
                len(clients))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    table = []
    for run_dir in args.runs:
        try:
            table.append(load_run_summary(run_dir))
        except FileNotFoundError as e:
            raise DataError(f"run {run_dir}: {e}") from e
    path = Path(args.output) if args.output else Path(args.runs[0]).parent / "report.csv"
    write_comparison(table, path)
    for row in table:
        print(f"{row.variant:18s} avg {row.average:.4f}  payload "
              f"{row.payload_bytes} B / checkpoint {row.checkpoint_bytes} B "
              f"= {row.payload_ratio:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofed",
        description="Federated prototype/adapter training on synthetic sites.")
    parser.add_argument("--version", action="version", version=wrapper_version())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with run settings")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one setting, may be repeated")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--log-level", default="info",
                        choices=sorted(internal.__strToLogLevel__))
    common.add_argument("--log-file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", parents=[common],
                       help="write the synthetic sites as PNM images and manifests")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", parents=[common], help="run the federation")
    p.add_argument("--rounds", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--variant", choices=sorted(internal.__StrVariant__))
    p.add_argument("--variants",
                   help="comma separated variants or 'default' for the grid")
    p.add_argument("--dump-payloads", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient checks")
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--atol", type=float, default=GRADCHECK_ATOL,
                   help="absolute error below which a coordinate passes")
    p.add_argument("--seeds", type=int, default=GRADCHECK_SEEDS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", parents=[common],
                       help="prototype heatmaps, boxes and agreement")
    p.add_argument("images", nargs="*", help="PGM/PPM images")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--run-dir")
    p.add_argument("--top-k", type=int)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", parents=[common],
                       help="comparison table of finished runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    init(args.log_level, args.log_file)
    try:
        return args.func(args)
    except (ConfigurationError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ProtoFedException, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
