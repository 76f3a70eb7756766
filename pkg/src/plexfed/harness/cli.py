"""The plexfed command line.

Subcommands: gen-data, run-ft, run-il, serve, report, eval, default-config.
Failures exit nonzero and print a machine-readable JSON error to stderr.
"""

import argparse
import json
import sys

from ..segmenter import REGION_TAG
from .config import default_config, load_config
from . import experiment


def _add_config_arg(sub):
    sub.add_argument("--config", required=True, help="experiment config JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plexfed",
        description="Federated incremental learning on synthetic phantom volumes.")
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("gen-data", help="generate cohorts, run QC, write the dataset tree")
    _add_config_arg(s)
    s.add_argument("--force", action="store_true",
                   help="overwrite an existing data tree")

    s = subs.add_parser("run-ft", help="train Model 0, FT1-4 and FTall, then evaluate")
    _add_config_arg(s)

    s = subs.add_parser("run-il", help="run the four sequential federation rounds")
    _add_config_arg(s)
    s.add_argument("--server", default=None,
                   help="address of an already-running server (host:port); "
                        "otherwise an in-process server is booted")

    s = subs.add_parser("serve", help="run the federation server in the foreground")
    _add_config_arg(s)

    s = subs.add_parser("report", help="emit aggregate tables and regression CSVs")
    _add_config_arg(s)

    s = subs.add_parser("eval", help="evaluate one bundle on one dataset")
    _add_config_arg(s)
    s.add_argument("--bundle", required=True, help="path to a .mbl bundle file")
    s.add_argument("--dataset", required=True, help="domain id, e.g. D2")

    s = subs.add_parser("default-config", help="print the default experiment config")
    s.add_argument("-o", "--output", default=None, help="write to a file instead of stdout")

    return parser


def _serve(config) -> int:
    from ..federation.server import make_http_server

    app = experiment.build_server(config)
    httpd = make_http_server(app, config.server_addr)
    host, port = httpd.server_address[:2]
    print(f"serving region {REGION_TAG!r} on {host}:{port}")
    sys.stdout.flush()
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "default-config":
            text = default_config().to_json()
            if args.output:
                with open(args.output, "w") as f:
                    f.write(text + "\n")
            else:
                print(text)
            return 0

        config = load_config(args.config)
        if args.command == "gen-data":
            manifest = experiment.cmd_gen_data(config, force=args.force)
            excluded = {d: info["excluded"]
                        for d, info in manifest["domains"].items() if info["excluded"]}
            print(json.dumps({"domains": list(manifest["domains"]),
                              "excluded": excluded}, sort_keys=True))
        elif args.command == "run-ft":
            summary = experiment.cmd_run_ft_arm(config)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "run-il":
            url = f"http://{args.server}" if args.server else None
            summary = experiment.cmd_run_il_arm(config, server_url=url)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "serve":
            return _serve(config)
        elif args.command == "report":
            summary = experiment.cmd_report(config)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "eval":
            print(experiment.cmd_eval(config, args.bundle, args.dataset), end="")
        return 0
    except Exception as e:  # CLI boundary: every failure becomes a JSON error
        print(json.dumps({"error": type(e).__name__, "detail": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
