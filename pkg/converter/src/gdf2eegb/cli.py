"""Command line front end: one subject in, train/eval containers out."""

import argparse
import json
import os
import sys
import tempfile

from .convert import RULES, ConversionError, convert
from .gdf import GdfError

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _stem(out):
    return out[:-5] if out.endswith(".eegb") else out


def cmd_convert(args):
    rules = RULES[args.dataset]
    if not 1 <= args.subject <= 9:
        raise ConversionError(f"subject must be 1..9, got {args.subject}")
    splits = {"train": rules.train_files(args.subject),
              "eval": rules.eval_files(args.subject)}
    missing = [n for names in splits.values() for n in names
               if not os.path.exists(os.path.join(args.in_dir, n))]
    if missing:
        raise FileNotFoundError(f"no such file under {args.in_dir}: {', '.join(missing)}")

    stem = _stem(args.out)
    subject = f"{'A' if args.dataset == '2a' else 'B'}{args.subject:02d}"
    report = {"dataset": args.dataset, "subject": subject}
    for split, names in splits.items():
        out_path = f"{stem}_{split}.eegb"
        paths = [os.path.join(args.in_dir, n) for n in names]
        report[split] = convert(
            paths, rules.epoch_spec, out_path,
            expected_channels=rules.n_channels,
            class_names=rules.class_names, subject=subject)
        r = report[split]
        dropped = r["dropped_artifact"] + r["dropped_unlabeled"] + r["dropped_out_of_bounds"]
        print(f"{split}: {r['trials']} trials ({dropped} dropped) -> {out_path}")
    _atomic_write(f"{stem}_report.json",
                  (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gdf2eegb",
        description="Convert motor-imagery GDF recordings into EEGB containers")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("convert", help="convert one subject's sessions")
    p.add_argument("--dataset", choices=sorted(RULES), required=True)
    p.add_argument("--subject", type=int, required=True, metavar="N")
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR",
                   help="directory holding the raw .gdf files")
    p.add_argument("--out", required=True, metavar="FILE",
                   help="output stem; writes FILE_train.eegb, FILE_eval.eegb "
                        "and FILE_report.json")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConversionError, GdfError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
