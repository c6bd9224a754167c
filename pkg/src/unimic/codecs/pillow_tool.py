"""Minimal encoder/decoder executable backed by Pillow (WebP, JPEG).

Used as an external codec in manifests when no native tools are installed::

    python -m unimic.codecs.pillow_tool encode --format WEBP --quality 50 in.png out.webp
    python -m unimic.codecs.pillow_tool decode out.webp decoded.png
"""

import argparse
import sys

from PIL import Image


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pillow_tool")
    sub = parser.add_subparsers(dest="cmd", required=True)
    enc = sub.add_parser("encode")
    enc.add_argument("--format", default="WEBP")
    enc.add_argument("--quality", type=float, required=True)
    enc.add_argument("input")
    enc.add_argument("output")
    dec = sub.add_parser("decode")
    dec.add_argument("input")
    dec.add_argument("output")
    args = parser.parse_args(argv)

    try:
        with Image.open(args.input) as im:
            im = im.convert("RGB")
            if args.cmd == "encode":
                im.save(args.output, format=args.format, quality=int(round(args.quality)))
            else:
                im.save(args.output, format="PNG")
    except OSError as exc:
        print(f"pillow_tool: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
