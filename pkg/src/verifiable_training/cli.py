"""Command-line client for ML engineers and verifiers.

Exit codes:

* 0  success, or every verification check passed
* 1  a verification check failed
* 2  usage error, transport failure, or the gateway rejected the request

Configuration is read from ``~/.config/aibomgen/config.json`` (or the file
named by ``AIBOMGEN_CONFIG``) with keys ``gateway``, ``token`` and
``public_key``.  ``AIBOMGEN_GATEWAY``, ``AIBOMGEN_TOKEN`` and
``AIBOMGEN_PUBLIC_KEY`` override the file; command-line flags override both.

Passing ``--public-key`` (or ``--offline``) to ``verify link``, ``verify hash``
or ``verify aibom`` runs the check locally with the same code the gateway
uses, and never opens a network connection.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, NoReturn

import click
import httpx

from .aibom import verify_aibom
from .attestation import LinkFile, MatchStatus, verify_artifact_against_link, verify_link
from .core import canonical_parse, canonical_serialize, compute_digest
from .signing import SignedEnvelope, key_id_for, verify_envelope

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2

DEFAULT_CONFIG_PATH = Path("~/.config/aibomgen/config.json")
DEFAULT_GATEWAY = "http://127.0.0.1:8080"


@dataclass
class Config:
    gateway: str = DEFAULT_GATEWAY
    token: str | None = None
    public_key: Path | None = None

    @classmethod
    def load(cls, path: Path | None = None, env: dict[str, str] | None = None) -> Config:
        env = dict(os.environ if env is None else env)
        path = path or Path(env.get("AIBOMGEN_CONFIG", DEFAULT_CONFIG_PATH)).expanduser()
        raw: dict[str, Any] = {}
        if path.is_file():
            try:
                raw = json.loads(path.read_text("utf-8"))
            except ValueError as exc:
                raise click.UsageError(f"config file {path} is not valid JSON: {exc}") from None
        gateway = env.get("AIBOMGEN_GATEWAY") or raw.get("gateway") or DEFAULT_GATEWAY
        token = env.get("AIBOMGEN_TOKEN") or raw.get("token")
        pub = env.get("AIBOMGEN_PUBLIC_KEY") or raw.get("public_key")
        return cls(gateway=gateway.rstrip("/"), token=token, public_key=Path(pub).expanduser() if pub else None)


class TransportError(click.ClickException):
    exit_code = EXIT_USAGE


@dataclass
class Context:
    config: Config
    as_json: bool
    client_factory: Callable[[Config], httpx.Client]

    def client(self) -> httpx.Client:
        return self.client_factory(self.config)

    def auth(self) -> dict[str, str]:
        if not self.config.token:
            raise click.UsageError("no bearer token configured (set AIBOMGEN_TOKEN or --token)")
        return {"Authorization": f"Bearer {self.config.token}"}

    def request(self, method: str, url: str, *, auth: bool = False, ok: tuple[int, ...] = (200, 201), **kw: Any) -> httpx.Response:
        headers = self.auth() if auth else {}
        try:
            with self.client() as c:
                r = c.request(method, url, headers=headers, **kw)
        except httpx.HTTPError as exc:
            raise TransportError(f"cannot reach gateway {self.config.gateway}: {exc}") from None
        if r.status_code not in ok:
            raise TransportError(f"gateway answered {r.status_code}: {_detail(r)}")
        return r

    def emit(self, payload: Any, human: str) -> None:
        if self.as_json:
            click.echo(canonical_serialize(payload).decode())
        else:
            click.echo(human)


def _detail(r: httpx.Response) -> str:
    try:
        return str(r.json().get("detail", r.text))
    except ValueError:
        return r.text


def _default_client(config: Config) -> httpx.Client:
    return httpx.Client(base_url=config.gateway, timeout=30.0)


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise click.UsageError(f"cannot read {path}: {exc}") from None


def _finish(ctx: Context, passed: bool, payload: Any, human: str) -> NoReturn:
    ctx.emit(payload, human)
    sys.exit(EXIT_OK if passed else EXIT_VERIFY_FAILED)


def _report_text(report: dict[str, Any]) -> str:
    lines = [f"{'PASS' if report['passed'] else 'FAIL'}"]
    for name, check in sorted(report.get("checks", {}).items()):
        mark = "ok  " if check["passed"] else "FAIL"
        lines.append(f"  [{mark}] {name}" + (f": {check['detail']}" if check.get("detail") else ""))
    return "\n".join(lines)


def _local_key(ctx: Context, public_key: str | None, offline: bool) -> bytes | None:
    if public_key:
        return _read(public_key)
    if offline:
        if ctx.config.public_key is None:
            raise click.UsageError("--offline needs a public key (--public-key or config public_key)")
        return _read(str(ctx.config.public_key))
    return None


def _envelope(data: bytes) -> SignedEnvelope | None:
    try:
        return SignedEnvelope.from_bytes(data)
    except ValueError:
        return None


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), help="Config file path.")
@click.option("--gateway", help="Gateway base URL.")
@click.option("--token", help="Bearer token for engineer commands.")
@click.option("--json", "as_json", is_flag=True, help="Print canonical JSON to stdout.")
@click.pass_context
def main(click_ctx: click.Context, config_path: Path | None, gateway: str | None, token: str | None, as_json: bool) -> None:
    """Verifiable training client."""
    config = Config.load(config_path)
    if gateway:
        config.gateway = gateway.rstrip("/")
    if token:
        config.token = token
    factory = (click_ctx.obj or {}).get("client_factory", _default_client)
    click_ctx.obj = Context(config, as_json, factory)


pass_ctx = click.make_pass_decorator(Context)


# -- engineer commands ---------------------------------------------------------


def _upload(ctx: Context, path: str) -> dict[str, Any]:
    data = _read(path)
    r = ctx.request("POST", "/v1/artifacts", auth=True, files={"file": (Path(path).name, data, "application/octet-stream")})
    return r.json()


@main.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@pass_ctx
def upload(ctx: Context, file: str) -> None:
    """Upload a dataset or base model; prints its digest."""
    ref = _upload(ctx, file)
    ctx.emit(ref, ref["digest"]["hex"])


def _dataset_ref(ctx: Context, ref: str) -> str:
    if Path(ref).is_file():
        return _upload(ctx, ref)["digest"]["hex"]
    if len(ref) == 64 and all(c in "0123456789abcdef" for c in ref):
        return ref
    raise click.BadParameter("expected a sha256 hex digest or an existing file", param_hint="--dataset")


@main.command()
@click.option("--dataset", required=True, help="Uploaded dataset digest, or a local file to upload first.")
@click.option("--base-model", help="Uploaded base model digest, or a local file.")
@click.option("--epochs", type=int, required=True)
@click.option("--batch-size", type=int, required=True)
@click.option("--lr", type=float, required=True)
@click.option("--task", type=click.Choice(["regression", "classification"]), default="regression", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@pass_ctx
def submit(ctx: Context, dataset: str, base_model: str | None, epochs: int, batch_size: int, lr: float, task: str, seed: int) -> None:
    """Submit a training job."""
    body: dict[str, Any] = {
        "dataset": _dataset_ref(ctx, dataset),
        "config": {"epochs": epochs, "batch_size": batch_size, "learning_rate": lr, "task": task, "seed": seed},
    }
    if base_model:
        body["base_model"] = _dataset_ref(ctx, base_model)
    rec = ctx.request("POST", "/v1/jobs", auth=True, json=body).json()
    ctx.emit(rec, rec["job_id"])


@main.command()
@click.argument("job_id")
@pass_ctx
def status(ctx: Context, job_id: str) -> None:
    """Show job state."""
    rec = ctx.request("GET", f"/v1/jobs/{job_id}", auth=True).json()
    human = f"{rec['job_id']} {rec['state']}"
    if rec.get("failure_reason"):
        human += f"\n  reason: {rec['failure_reason']}"
    for out in rec.get("outputs", []):
        human += f"\n  {out['name']} sha256:{out['digest']['hex']}"
    ctx.emit(rec, human)


@main.command()
@click.argument("job_id")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), help="Target directory (default ./<job_id>).")
@pass_ctx
def fetch(ctx: Context, job_id: str, out: Path | None) -> None:
    """Download every output of a completed job and check its digest."""
    listing = ctx.request("GET", f"/v1/jobs/{job_id}/artifacts", auth=True).json()
    if not listing:
        raise TransportError(f"job {job_id} has no downloadable outputs (not completed?)")
    out = out or Path(job_id)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for entry in listing:
        name = entry["artifact"]["name"]
        data = ctx.request("GET", entry["url"]).content
        actual = compute_digest(data).hex
        expected = entry["artifact"]["digest"]["hex"]
        (out / name).write_bytes(data)
        results.append({"name": name, "path": str(out / name), "expected": expected, "actual": actual})
    ok = all(r["expected"] == r["actual"] for r in results)
    human = "\n".join(f"{'ok  ' if r['expected'] == r['actual'] else 'FAIL'} {r['path']}" for r in results)
    _finish(ctx, ok, {"passed": ok, "files": results}, human)


# -- verifier commands ---------------------------------------------------------


@main.group()
def verify() -> None:
    """Verify attestations and artifacts."""


def _remote_report(ctx: Context, url: str, **kw: Any) -> dict[str, Any] | None:
    """POST to a verify endpoint; None when the gateway rejected the input as malformed."""
    r = ctx.request("POST", url, ok=(200, 400), **kw)
    if r.status_code == 400:
        return None
    return r.json()


def _malformed(ctx: Context, what: str, detail: str = "") -> NoReturn:
    msg = f"malformed {what}" + (f": {detail}" if detail else "")
    _finish(ctx, False, {"passed": False, "checks": {}, "reasons": [msg]}, f"FAIL\n  {msg}")


@verify.command("link")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--public-key", type=click.Path(exists=True, dir_okay=False), help="Verify locally with this PEM key.")
@click.option("--offline", is_flag=True, help="Verify locally with the configured public key.")
@pass_ctx
def verify_link_cmd(ctx: Context, file: str, public_key: str | None, offline: bool) -> None:
    """Check a link file's signature, layout and artifact rules."""
    data = _read(file)
    key = _local_key(ctx, public_key, offline)
    if key is not None:
        env = _envelope(data)
        if env is None:
            _malformed(ctx, "link envelope")
        report = verify_link(env, key).to_dict()
    else:
        report = _remote_report(ctx, "/v1/verify/link", content=data)
        if report is None:
            _malformed(ctx, "link envelope")
    _finish(ctx, report["passed"], report, _report_text(report))


@verify.command("hash")
@click.option("--link", "link_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--artifact", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--name", required=True, help="Artifact name as recorded in the link.")
@click.option("--public-key", type=click.Path(exists=True, dir_okay=False), help="Also check the link signature locally.")
@click.option("--offline", is_flag=True, help="Verify locally with the configured public key.")
@pass_ctx
def verify_hash_cmd(ctx: Context, link_file: str, artifact: str, name: str, public_key: str | None, offline: bool) -> None:
    """Compare an artifact's digest against the one recorded in a link."""
    link_bytes, data = _read(link_file), _read(artifact)
    key = _local_key(ctx, public_key, offline)
    if key is not None:
        env = _envelope(link_bytes)
        if env is None:
            _malformed(ctx, "link envelope")
        sig = verify_envelope(env, key)
        try:
            result = verify_artifact_against_link(LinkFile.from_envelope(env), name, data).to_dict()
        except ValueError as exc:
            _malformed(ctx, "link", str(exc))
        result["signature_valid"] = sig.passed
        passed = sig.passed and result["status"] == MatchStatus.MATCH.value
    else:
        r = ctx.request(
            "POST",
            "/v1/verify/hash",
            ok=(200, 400),
            files={"link": ("link.json", link_bytes), "artifact": (Path(artifact).name, data)},
            data={"name": name},
        )
        if r.status_code == 400:
            _malformed(ctx, "link envelope", _detail(r))
        result = r.json()
        passed = result["status"] == MatchStatus.MATCH.value
    human = f"{result['status']} {result['name']}"
    if result.get("expected") or result.get("actual"):
        human += f"\n  expected {result.get('expected')}\n  actual   {result.get('actual')}"
    if result.get("signature_valid") is False:
        human += "\n  link signature INVALID"
    _finish(ctx, passed, result, human)


@verify.command("aibom")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--public-key", type=click.Path(exists=True, dir_okay=False), help="Verify locally with this PEM key.")
@click.option("--offline", is_flag=True, help="Verify locally with the configured public key.")
@click.option("--link", "link_file", type=click.Path(exists=True, dir_okay=False), help="Local link file (offline).")
@click.option(
    "--artifacts",
    type=click.Path(exists=True, file_okay=False),
    help="Directory holding the listed artifacts; enables artifact digest checks offline.",
)
@pass_ctx
def verify_aibom_cmd(
    ctx: Context, file: str, public_key: str | None, offline: bool, link_file: str | None, artifacts: str | None
) -> None:
    """Check an AIBOM's schema, signature and link cross-reference."""
    data = _read(file)
    key = _local_key(ctx, public_key, offline)
    if key is None:
        report = _remote_report(ctx, "/v1/verify/aibom", content=data)
        if report is None:
            _malformed(ctx, "AIBOM")
        _finish(ctx, report["passed"], report, _report_text(report))
    try:
        doc = canonical_parse(data)
    except ValueError as exc:
        _malformed(ctx, "AIBOM", str(exc))
    if not isinstance(doc, dict):
        _malformed(ctx, "AIBOM", "not a JSON object")
    link_bytes = _read(link_file) if link_file else None
    resolver = None
    if artifacts:
        root = Path(artifacts)

        def resolver(name: str) -> bytes:
            path = root / name
            if path.parent != root or not path.is_file():
                raise KeyError(f"no file {name} in {root}")
            return path.read_bytes()

    report = verify_aibom(doc, key, link_bytes, resolver).to_dict()
    _finish(ctx, report["passed"], report, _report_text(report))


@verify.command("storage")
@click.option("--link", "link_file", required=True, type=click.Path(exists=True, dir_okay=False))
@pass_ctx
def verify_storage_cmd(ctx: Context, link_file: str) -> None:
    """Ask the gateway to compare stored objects against a link."""
    report = _remote_report(ctx, "/v1/verify/storage", content=_read(link_file))
    if report is None:
        _malformed(ctx, "link envelope")
    lines = [("PASS" if report["passed"] else "FAIL") + f"  signature: {'ok' if report['signature']['passed'] else 'INVALID'}"]
    lines += [f"  {r['status']:<12} {r['name']}" for r in report["results"]]
    _finish(ctx, report["passed"], report, "\n".join(lines))


# -- keys ------------------------------------------------------------------------


@main.group()
def keys() -> None:
    """Platform key management."""


@keys.command("fetch")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write the PEM here instead of stdout.")
@pass_ctx
def keys_fetch(ctx: Context, out: Path | None) -> None:
    """Download the platform's public verification key."""
    r = ctx.request("GET", "/v1/keys/public")
    pem = r.content
    kid = key_id_for(pem)
    if r.headers.get("X-Key-Id") not in (None, kid):
        raise TransportError("X-Key-Id header does not match the returned key")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(pem)
        ctx.emit({"key_id": kid, "path": str(out)}, f"{kid} -> {out}")
    else:
        ctx.emit({"key_id": kid, "pem": pem.decode()}, pem.decode().rstrip("\n"))


@keys.command("generate")
@click.option("--data-dir", type=click.Path(file_okay=False, path_type=Path), help="Defaults to AIBOMGEN_DATA_DIR.")
@click.option("--force", is_flag=True, help="Replace an existing key pair.")
@pass_ctx
def keys_generate(ctx: Context, data_dir: Path | None, force: bool) -> None:
    """Create the platform signing key pair (server-side setup)."""
    from .service import Settings, init_keys

    settings = Settings.from_env()
    if data_dir is not None:
        settings.data_dir = data_dir
    key = init_keys(settings, overwrite=force)
    ctx.emit(
        {"key_id": key.key_id, "private_key": str(settings.signing_key_path), "public_key": str(settings.public_key_path)},
        f"{key.key_id}\n  private {settings.signing_key_path}\n  public  {settings.public_key_path}",
    )


# -- server ----------------------------------------------------------------------


@main.command()
def serve() -> None:
    """Run the gateway with background workers, configured from AIBOMGEN_* variables."""
    import uvicorn

    from .api.app import create_app_from_env
    from .service import Settings

    host, _, port = Settings.from_env().listen_addr.rpartition(":")
    uvicorn.run(create_app_from_env(), host=host or "127.0.0.1", port=int(port))


if __name__ == "__main__":
    main()
