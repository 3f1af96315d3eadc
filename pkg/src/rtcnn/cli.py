"""``rtcnn`` command line.

Machine-readable results go to stdout as JSON lines; human-oriented tables go
to stderr. Exit codes: 0 ok, 2 usage, 3 I/O or parse error, 4 contract or
configuration error, 5 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, gbp, graph, pipeline, training
from .errors import ConfigError, DataError, RtcnnError
from .weights import load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONTRACT, EXIT_INTERNAL = 0, 2, 3, 4, 5
ARCHS = sorted(graph.BUILDERS)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _class_names(k: int) -> list[str]:
    return graph._check_classes(k, None)


def load_dataset(path, class_names) -> data.Dataset:
    """FER-2013 CSV or ``path,label`` manifest, told apart by the header line."""
    try:
        with open(path, newline="") as fh:
            header = fh.readline().strip()
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    if header.replace(" ", "") == "path,label":
        return data.load_manifest(path, class_names)
    return data.load_fer2013(path)


def cmd_params(args):
    model = graph.build(args.arch, args.classes, args.input_hw)
    total = graph.count_parameters(model)
    print(f"{'node':<22}{'kind':<11}{'output':<16}{'params':>9}", file=sys.stderr)
    for name, kind, shape, count in graph.parameter_table(model):
        print(f"{name:<22}{kind:<11}{'x'.join(map(str, shape)):<16}{count:>9}", file=sys.stderr)
    print(f"{'total':<49}{total:>9}", file=sys.stderr)
    _emit({"arch": args.arch, "classes": args.classes, "input_hw": args.input_hw, "parameters": total})


def cmd_init(args):
    model = graph.build(args.arch, args.classes, args.input_hw, seed=args.seed)
    size = save_weights(model, args.out)
    _emit({"arch": args.arch, "classes": args.classes, "out": args.out, "bytes": size})


def cmd_train(args):
    if not Path(args.data).is_file():
        raise DataError(f"data file not found: {args.data}")
    model = graph.build(args.arch, args.classes, args.input_hw, seed=args.seed)
    dataset = load_dataset(args.data, model.class_names)
    if args.limit:
        dataset = dataset.subset(np.arange(min(args.limit, len(dataset))))
    out = Path(args.out)
    checkpoint = args.checkpoint or str(out.with_suffix(".best.rtcw"))
    history_path = args.history or str(out.with_suffix(".history.csv"))
    cfg = training.TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=args.lr, seed=args.seed,
                               checkpoint_path=checkpoint, val_fraction=args.val_fraction,
                               schedule=args.schedule, augment_flip=args.augment_flip,
                               stop_at_train_acc=args.target_acc)
    history = training.train(model, dataset, cfg)
    history.write_csv(history_path)
    save_weights(model, out)
    last = history.records[-1]
    _emit({"epochs_run": last.epoch, "train_loss": last.train_loss, "train_acc": last.train_acc,
           "val_acc": last.val_acc, "best_epoch": history.best_epoch, "weights": str(out),
           "checkpoint": checkpoint, "history": history_path})


def cmd_eval(args):
    model = load_weights(args.weights)
    dataset = load_dataset(args.data, model.class_names)
    if args.limit:
        dataset = dataset.subset(np.arange(min(args.limit, len(dataset))))
    acc, cm = training.evaluate(model, dataset)
    csv_text = cm.to_csv(normalized=True)
    if args.cm:
        Path(args.cm).write_text(csv_text)
    else:
        sys.stderr.write(csv_text)
    _emit({"accuracy": acc, "samples": len(dataset), "confusion_matrix": args.cm,
           "normalized": cm.normalized().round(6).tolist(), "class_names": cm.class_names})


def _read_frame(path):
    return data.decode_pgm(path)


def cmd_classify(args):
    gender = load_weights(args.gender_weights)
    emotion = load_weights(args.emotion_weights)
    frame = _read_frame(args.image)
    h, w = frame.shape[2:]
    boxes = data.load_boxes(args.boxes) if args.boxes else [data.FaceBox(0, 0, w, h)]
    for result in pipeline.classify_faces(frame, boxes, gender, emotion):
        _emit(result.to_json())


def cmd_gbp(args):
    model = load_weights(args.weights)
    frame = _read_frame(args.image)
    side = model.input_shape[1]
    x = data.preprocess(frame[0, 0], side).astype(model.dtype)
    target = gbp.select_target(model, x, args.layer) if args.layer else None
    smap = gbp.reconstruct(model, x, target, args.mode)
    if args.montage:
        gbp.render(smap, args.out, montage_input=x)
    else:
        gbp.render(smap, args.out)
    t = smap.target
    _emit({"out": args.out, "mode": args.mode, "layer": t.layer, "channel": t.channel, "i": t.i, "j": t.j,
           "height": side, "width": side * (2 if args.montage else 1)})


def cmd_bench(args):
    gender = load_weights(args.gender_weights)
    emotion = load_weights(args.emotion_weights)
    report = pipeline.benchmark(gender, emotion, args.input_hw, args.iters)
    _emit(report.to_json())


def cmd_synth_fer(args):
    data.write_synthetic_fer(args.out, args.n, args.seed)
    _emit({"out": args.out, "rows": args.n, "seed": args.seed})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtcnn", description="Real-time CNN engine: train, evaluate, classify, visualise.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("params", help="parameter count and per-layer table")
    s.add_argument("--arch", choices=ARCHS, required=True)
    s.add_argument("--classes", type=int, default=7)
    s.add_argument("--input-hw", type=int, default=48)
    s.set_defaults(fn=cmd_params)

    s = sub.add_parser("init", help="write freshly initialised weights")
    s.add_argument("--arch", choices=ARCHS, required=True)
    s.add_argument("--classes", type=int, default=7)
    s.add_argument("--input-hw", type=int, default=48)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("train", help="train on a FER-2013 CSV or a path,label manifest")
    s.add_argument("--arch", choices=ARCHS, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="final weights; the best-validation checkpoint goes next to it")
    s.add_argument("--classes", type=int, default=7)
    s.add_argument("--input-hw", type=int, default=48)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--schedule", choices=["constant", "plateau"], default="constant")
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--limit", type=int, help="use only the first N samples")
    s.add_argument("--target-acc", type=float, help="stop once training accuracy reaches this value")
    s.add_argument("--augment-flip", action="store_true")
    s.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    s.add_argument("--checkpoint", help="best-validation checkpoint (default: <out>.best.rtcw)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="accuracy and normalised confusion matrix")
    s.add_argument("--weights", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--cm", help="write the confusion-matrix CSV here (default: stderr)")
    s.add_argument("--limit", type=int)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("classify", help="gender + emotion for each face box")
    s.add_argument("--gender-weights", required=True)
    s.add_argument("--emotion-weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--boxes", help="x,y,w,h per line; default is the whole image")
    s.set_defaults(fn=cmd_classify)

    s = sub.add_parser("gbp", help="guided back-propagation saliency map")
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--mode", choices=["guided", "deconvnet", "standard"], default="guided")
    s.add_argument("--out", required=True)
    s.add_argument("--layer", help="layer to visualise (default: last convolution before pooling)")
    s.add_argument("--montage", action="store_true", help="put the input next to the map")
    s.set_defaults(fn=cmd_gbp)

    s = sub.add_parser("bench", help="latency of the stacked pipeline and of each architecture")
    s.add_argument("--gender-weights", required=True)
    s.add_argument("--emotion-weights", required=True)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--input-hw", type=int, default=48)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("synth-fer", help="write a synthetic FER-2013-format CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth_fer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except RtcnnError as exc:
        category = "io" if exc.exit_code == EXIT_IO else "contract"
        _emit({"error": str(exc), "category": category, "type": type(exc).__name__})
        return exc.exit_code
    except OSError as exc:
        _emit({"error": str(exc), "category": "io", "type": type(exc).__name__})
        return EXIT_IO
    except ValueError as exc:
        _emit({"error": str(exc), "category": "contract", "type": type(exc).__name__})
        return EXIT_CONTRACT
    except Exception as exc:  # noqa: BLE001
        _emit({"error": str(exc), "category": "internal", "type": type(exc).__name__})
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
