"""Thin command-line client for the pipeline service.

Every subcommand posts a job to a running service (start one with
``ialsim serve``), polls it to completion, and prints the job result as
JSON. Requests can be assembled from a JSON config file (``--config``),
with command-line flags taking precedence over file values.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 artifact or I/O
error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import httpx

DEFAULT_URL = "http://127.0.0.1:8317"

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_ARTIFACT = 3

_KIND_TO_EXIT = {"check": EXIT_CHECK, "usage": EXIT_USAGE,
                 "artifact": EXIT_ARTIFACT, "internal": EXIT_CHECK}


class ServiceClient:
    def __init__(self, base_url: str = DEFAULT_URL, http_client=None,
                 poll_interval: float = 0.25):
        self._client = http_client or httpx.Client(base_url=base_url,
                                                   timeout=60.0)
        self.poll_interval = poll_interval

    def submit(self, command: str, request: dict) -> dict:
        response = self._client.post(f"/{command}", json=request)
        if response.status_code == 422:
            raise UsageRejected(response.text)
        response.raise_for_status()
        return response.json()

    def wait(self, job_id: str) -> dict:
        while True:
            response = self._client.get(f"/jobs/{job_id}")
            response.raise_for_status()
            job = response.json()
            if job["status"] in ("done", "failed"):
                return job
            time.sleep(self.poll_interval)

    def run(self, command: str, request: dict) -> dict:
        job = self.submit(command, request)
        return self.wait(job["job_id"])

    def close(self) -> None:
        self._client.close()


class UsageRejected(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise UsageRejected(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageRejected(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise UsageRejected(f"config file {path} must hold a JSON object")
    return doc


def _merge_request(args: argparse.Namespace, keys: list[str]) -> dict:
    request = _load_config(getattr(args, "config", None))
    for key in keys:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            request[key] = value
    return request


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with request fields")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", dest="out_dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ialsim",
        description="train policies on influence-augmented local simulators")
    parser.add_argument("--url", default=DEFAULT_URL,
                        help=f"service base URL (default {DEFAULT_URL})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the pipeline service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8317)
    p.add_argument("--workers", type=int, default=1,
                   help="concurrent pipeline jobs")

    p = sub.add_parser("collect", help="collect an influence dataset")
    _add_common(p)
    p.add_argument("--env", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("train-aip", help="train or build an influence predictor")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--variant", default=None,
                   choices=["trained", "untrained", "fixed-marginal"])
    p.add_argument("--arch", default=None, choices=["ff", "gru"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("train-policy", help="train a policy on gs or ials")
    _add_common(p)
    p.add_argument("--env", default=None)
    p.add_argument("--sim", default=None, choices=["gs", "ials"])
    p.add_argument("--predictor", default=None)
    p.add_argument("--total-steps", dest="total_steps", type=int, default=None)
    p.add_argument("--obs-stack", dest="obs_stack", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)

    p = sub.add_parser("evaluate", help="evaluate a policy on the global sim")
    _add_common(p)
    p.add_argument("--env", default=None)
    p.add_argument("--policy", default=None)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("experiment", help="run simulator arms x seeds")
    _add_common(p)
    p.add_argument("--env", default=None)
    p.add_argument("--total-steps", dest="total_steps", type=int, default=None)

    p = sub.add_parser("verify", help="run the correctness battery")
    _add_common(p)
    p.add_argument("--fast", action="store_true", default=None)

    return parser


_REQUEST_KEYS = {
    "collect": ["env", "n", "k", "seed", "out_dir"],
    "train-aip": ["dataset", "variant", "arch", "epochs", "lr", "seed", "out_dir"],
    "train-policy": ["env", "sim", "predictor", "total_steps", "obs_stack",
                     "eval_every", "seed", "out_dir"],
    "evaluate": ["env", "policy", "episodes", "seed", "out_dir"],
    "experiment": ["env", "total_steps", "seed", "out_dir"],
    "verify": ["seed", "fast", "out_dir"],
}


def main(argv: list[str] | None = None, client_factory=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import create_app
        uvicorn.run(create_app(workers=args.workers), host=args.host,
                    port=args.port)
        return EXIT_OK

    try:
        request = _merge_request(args, _REQUEST_KEYS[args.command])
    except UsageRejected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if client_factory is not None:
        client = client_factory(args.url)
    else:
        client = ServiceClient(args.url)
    try:
        job = client.run(args.command, request)
    except UsageRejected as exc:
        print(f"error: request rejected: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service at {args.url}: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    finally:
        client.close()

    if job["status"] == "done":
        print(json.dumps(job["result"], indent=2))
        return EXIT_OK
    print(f"error ({job.get('error_kind')}): {job.get('error')}", file=sys.stderr)
    return _KIND_TO_EXIT.get(job.get("error_kind"), EXIT_CHECK)


if __name__ == "__main__":
    sys.exit(main())
