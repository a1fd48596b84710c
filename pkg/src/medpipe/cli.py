"""Command-line front.

Exit codes: 0 success, 1 domain error (validation, planning, enactment,
unknown ids), 2 usage error. With ``--json`` each verb prints exactly the
body the matching gateway endpoint would return.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Optional

from .errors import MedpipeError
from .provenance import ProvenanceEvent
from .service import Services, Settings, error_body
from .util import dumps

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None


def _filters(args: argparse.Namespace) -> dict[str, Any]:
    aliases = {"execution": "execution_id", "execution_id": "execution_id", "task": "task_id", "task_id": "task_id",
               "kind": "kind", "seq_from": "seq_from", "seq_to": "seq_to"}
    flt: dict[str, Any] = {}
    for item in args.filter or []:
        key, sep, value = item.partition("=")
        if not sep or key not in aliases:
            raise UsageError(f"bad filter {item!r}; use key=value with key in {sorted(set(aliases))}")
        flt[aliases[key]] = value
    for attr, key in (("execution", "execution_id"), ("task", "task_id"), ("kind", "kind")):
        if getattr(args, attr, None):
            flt[key] = getattr(args, attr)
    for key in ("seq_from", "seq_to"):
        if key in flt:
            try:
                flt[key] = int(flt[key])
            except ValueError:
                raise UsageError(f"{key} must be an integer") from None
    return flt


# -- human-readable rendering ------------------------------------------------


def _transition_line(e: ProvenanceEvent | dict[str, Any]) -> str:
    d = e.to_dict() if isinstance(e, ProvenanceEvent) else e
    p = d["payload"]
    where = p["task_id"] + ("" if p.get("study_index") is None else f"[{p['study_index']}]")
    return f"{d['seq']:>5} {where} attempt {p['attempt']}: {p.get('from_state') or '-'} -> {p['to_state']}"


def _render(verb: str, body: Any) -> str:
    if verb == "validate":
        return f"OK: pipeline {body['pipeline_id']} is valid"
    if verb in ("events",):
        lines = []
        for e in body["events"]:
            if e["kind"] == "TASK_TRANSITION":
                lines.append(_transition_line(e))
            else:
                lines.append(f"{e['seq']:>5} {e['kind']} {e.get('execution_id') or ''}".rstrip())
        return "\n".join(lines)
    if verb == "check":
        if body["homogeneous"]:
            return f"homogeneous over {', '.join(body['checked_fields']) or '(no fields)'}"
        return "\n".join(f"offender {iid} {tag}={val}" for iid, tag, val in body["offenders"])
    if verb == "status":
        line = f"{body['execution_id']}: {body['status']}"
        res = body.get("result") or {}
        if res.get("failure"):
            line += f" (task {res['failure']['task_id']}: {res['failure']['diagnostics'].strip()})"
        return line
    return json.dumps(body, indent=2, sort_keys=True)


def _render_error(body: dict[str, Any]) -> str:
    detail = body.get("detail")
    lines = [f"error [{body['code']}]: {body['message']}"]
    if isinstance(detail, dict) and "issues" in detail:
        for issue in detail["issues"]:
            lines.append(f"  {issue['code']} {','.join(issue['locus'])}: {issue['message']}")
    return "\n".join(lines)


# -- local and remote execution ---------------------------------------------


def _local(args: argparse.Namespace, out: Any) -> tuple[int, Any, str]:
    settings = Settings.load(args.config) if args.config else Settings.at_home(args.home)
    if args.verb == "serve":
        from .gateway import serve

        if args.bind:
            settings.bind_address = args.bind
        serve(settings)
        return EXIT_OK, None, "serve"
    svc = Services(settings)
    v = args.verb
    if v == "validate":
        return EXIT_OK, svc.register_pipeline(_read_text(args.pipeline)), "validate"
    if v == "plan":
        doc = _read_text(args.pipeline)
        grid = _read_json(args.grid)
        pid = svc.register_pipeline(doc)["pipeline_id"]
        return EXIT_OK, svc.make_plan(pid, args.studyset, grid), "plan"
    if v == "run":
        plan_id = _plan_id(args.plan)
        stream = None if args.json else (lambda e: _stream(e, out))
        exec_id, runner = svc.start_execution(plan_id, args.backend, args.retries, stream)
        runner()
        body = svc.execution_status(exec_id)
        return (EXIT_OK if body["status"] == "SUCCEEDED" else EXIT_DOMAIN), body, "status"
    if v == "status":
        return EXIT_OK, svc.execution_status(args.execution_id), "status"
    if v == "prov":
        if args.prov_verb == "events":
            return EXIT_OK, svc.events(**_filters(args)), "events"
        return EXIT_OK, svc.lineage(args.artifact_id), "lineage"
    if v == "study":
        if args.study_verb == "query":
            return EXIT_OK, svc.query_study(args.predicate, args.owner), "query"
        if args.study_verb == "check":
            return EXIT_OK, svc.homogeneity(args.set_id, args.fields), "check"
        rows = [json.loads(line) for line in _read_text(args.rows).splitlines() if line.strip()]
        return EXIT_OK, svc.add_images(rows, Path(args.rows).parent), "add"
    if v == "anonymize":
        return EXIT_OK, svc.anonymize(args.set_id, _read_json(args.policy), args.owner), "anonymize"
    raise UsageError(f"unknown verb {v}")  # pragma: no cover


def _stream(e: ProvenanceEvent, out: Any) -> None:
    if e.kind == "TASK_TRANSITION":
        print(_transition_line(e), file=out, flush=True)


def _remote(args: argparse.Namespace) -> tuple[int, Optional[str], str]:
    import httpx

    headers = {"Authorization": f"Bearer {args.token}"} if args.token else {}
    client = httpx.Client(base_url=args.remote, headers=headers, timeout=60)
    v = args.verb

    def call(method: str, url: str, **kw: Any) -> httpx.Response:
        return client.request(method, url, **kw)

    if v == "validate":
        r, kind = call("POST", "/pipelines", content=_read_text(args.pipeline).encode()), "validate"
    elif v == "plan":
        doc = _read_text(args.pipeline)
        r = call("POST", "/pipelines", content=doc.encode())
        if r.status_code < 400:
            body = {"pipeline_id": r.json()["pipeline_id"], "study_set_id": args.studyset, "grid": _read_json(args.grid)}
            r = call("POST", "/plans", json=body)
        kind = "plan"
    elif v == "run":
        plan_id = _plan_id(args.plan)
        r = call("POST", "/executions", json={"plan_id": plan_id, "backend": args.backend, "retry_limit": args.retries})
        if r.status_code < 400:
            exec_id = r.json()["execution_id"]
            while True:
                r = call("GET", f"/executions/{exec_id}")
                if r.status_code >= 400 or r.json()["status"] != "RUNNING":
                    break
                time.sleep(0.1)
        kind = "status"
    elif v == "status":
        r, kind = call("GET", f"/executions/{args.execution_id}"), "status"
    elif v == "prov" and args.prov_verb == "events":
        params = {k: v for k, v in _filters(args).items()}
        r, kind = call("GET", "/provenance/events", params=params), "events"
    elif v == "prov":
        r, kind = call("GET", f"/provenance/lineage/{args.artifact_id}"), "lineage"
    elif v == "study" and args.study_verb == "query":
        r, kind = call("POST", "/studysets/query", json={"predicate": args.predicate, "owner": args.owner}), "query"
    elif v == "study" and args.study_verb == "check":
        r, kind = call("POST", f"/studysets/{args.set_id}/homogeneity", json={"fields": args.fields}), "check"
    elif v == "anonymize":
        body = {"policy": _read_json(args.policy), "owner": args.owner}
        r, kind = call("POST", f"/studysets/{args.set_id}/anonymize", json=body), "anonymize"
    else:
        raise UsageError(f"verb {v!r} is not available with --remote")
    if r.status_code >= 400:
        return EXIT_DOMAIN, r.text, "error"
    code = EXIT_OK
    if kind == "status" and v == "run" and r.json().get("status") != "SUCCEEDED":
        code = EXIT_DOMAIN
    return code, r.text, kind


def _plan_id(arg: str) -> str:
    """Accept either a stored plan id or a file holding a plan document."""
    if arg.startswith("plan-") and not Path(arg).exists():
        return arg
    plan_doc = _read_json(arg)
    plan_id = plan_doc.get("plan_id") if isinstance(plan_doc, dict) else None
    if not plan_id:
        raise UsageError(f"{arg} does not hold a plan")
    return plan_id


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medpipe", description=__doc__.splitlines()[0])
    parser.add_argument("--home", default=os.environ.get("PIPELINE_HOME", ".medpipe"),
                        help="deployment directory (store/, catalog.jsonl, optional config.json)")
    parser.add_argument("--config", help="settings file; overrides --home")
    parser.add_argument("--json", action="store_true", help="print machine-readable JSON")
    parser.add_argument("--remote", nargs="?", const=os.environ.get("PIPELINE_GATEWAY_URL"), default=None,
                        help="talk to a gateway (default URL from PIPELINE_GATEWAY_URL)")
    parser.add_argument("--token", default=os.environ.get("PIPELINE_TOKEN"))
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate", help="parse and validate a pipeline document")
    p.add_argument("pipeline")

    p = sub.add_parser("plan", help="plan a pipeline against a grid view")
    p.add_argument("pipeline")
    p.add_argument("--grid", required=True)
    p.add_argument("--studyset")

    p = sub.add_parser("run", help="enact a plan")
    p.add_argument("plan", help="plan id or a file holding a plan document")
    p.add_argument("--backend", choices=["local", "simgrid"])
    p.add_argument("--retries", type=int, default=1)

    p = sub.add_parser("status", help="show an execution")
    p.add_argument("execution_id")

    prov = sub.add_parser("prov", help="inspect provenance").add_subparsers(dest="prov_verb", required=True)
    p = prov.add_parser("events")
    p.add_argument("--filter", action="append", metavar="KEY=VALUE")
    p.add_argument("--execution")
    p.add_argument("--task")
    p.add_argument("--kind")
    p = prov.add_parser("lineage")
    p.add_argument("artifact_id")

    study = sub.add_parser("study", help="define and check study sets").add_subparsers(dest="study_verb", required=True)
    p = study.add_parser("query")
    p.add_argument("predicate")
    p.add_argument("--owner", default="anonymous")
    p = study.add_parser("check")
    p.add_argument("set_id")
    p.add_argument("--fields", nargs="*", default=[])
    p = study.add_parser("add", help="import catalog rows from a JSON-lines file")
    p.add_argument("rows")

    p = sub.add_parser("anonymize", help="anonymize a study set into a new one")
    p.add_argument("set_id")
    p.add_argument("--policy", required=True)
    p.add_argument("--owner")

    p = sub.add_parser("serve", help="run a gateway instance")
    p.add_argument("--bind", help="host:port (default from settings or PIPELINE_BIND_ADDRESS)")
    return parser


def main(argv: Optional[Sequence[str]] = None, out: Any = None, err: Any = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.remote:
            if args.verb in ("serve",) or (args.verb == "study" and args.study_verb == "add"):
                raise UsageError(f"{args.verb} runs in-process only")
            code, text, kind = _remote(args)
            if args.json or kind == "error":
                print(text if args.json else _render_error(json.loads(text)), file=out if args.json else err)
            else:
                print(_render(kind, json.loads(text)), file=out)
            return code
        code, body, kind = _local(args, out)
        if body is not None:
            print(dumps(body) if args.json else _render(kind, body), file=out)
        return code
    except UsageError as exc:
        print(f"usage error: {exc}", file=err)
        return EXIT_USAGE
    except MedpipeError as exc:
        body = error_body(exc)
        if args.json:
            print(dumps(body), file=out)
        else:
            print(_render_error(body), file=err)
        return EXIT_DOMAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
