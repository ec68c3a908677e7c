"""Realize a decoded blend path through an external generation endpoint.

For each interpolation weight alpha the decoded feature file is posted to the
endpoint. The endpoint either returns an image, which is re-encoded with the
target backbone, or returns target features directly as a VIBE1 payload,
which are validated and written as-is. Failures are retried and then recorded
per alpha in the realize manifest rather than aborting the whole path.
"""

import json
import logging
import os
import tempfile
import time
from pathlib import Path

import requests

from feature_bridge.errors import BridgeError, EndpointError
from feature_bridge.extract import extract
from feature_bridge.vibe_format import parse_tokens, write_tokens

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 3
VIBE_CONTENT_TYPE = "application/x-vibe1"


def _post_with_retry(url, payload, headers, timeout):
    last = None
    for attempt in range(1, MAX_ATTEMPTS + 1):
        try:
            response = requests.post(url, data=payload, headers=headers, timeout=timeout)
            response.raise_for_status()
            return response
        except requests.RequestException as exc:
            last = exc
            logger.warning("endpoint attempt %d/%d failed: %s", attempt, MAX_ATTEMPTS, exc)
            if attempt < MAX_ATTEMPTS:
                time.sleep(0.1 * attempt)
    raise EndpointError(f"endpoint failed after {MAX_ATTEMPTS} attempts: {last}")


def _write_realized(response, out_path, alpha, config):
    content_type = response.headers.get("Content-Type", "").split(";")[0].strip()
    if content_type == VIBE_CONTENT_TYPE:
        meta, tokens = parse_tokens(response.content, origin="endpoint response")
        write_tokens(
            out_path, tokens, str(meta.get("image_id", f"alpha-{alpha:g}")),
            int(meta["height"]), int(meta["width"]), "target",
        )
        return
    if content_type.startswith("image/"):
        suffix = "." + content_type.split("/", 1)[1]
        fd, tmp = tempfile.mkstemp(suffix=suffix)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(response.content)
            extract(tmp, "target", config, out_path=out_path)
        finally:
            os.unlink(tmp)
        return
    raise EndpointError(f"endpoint returned unsupported content type {content_type!r}")


def realize_path(decoded_path_dir, config, timeout=30.0, rate_limit_s=0.0):
    """Realize every alpha of an exported blend path; returns the manifest.

    The manifest maps each alpha to its realized file or its failure message
    and is also written to ``<output_dir>/realize_manifest.json``.
    """
    if config.endpoint_url is None:
        raise BridgeError("realize requires an endpoint_url in the config")
    decoded_dir = Path(decoded_path_dir)
    manifest_path = decoded_dir / "manifest.json"
    if not manifest_path.exists():
        raise BridgeError(f"no manifest.json in {decoded_dir}")
    blend_manifest = json.loads(manifest_path.read_text())
    alphas = blend_manifest["alphas"]
    files = blend_manifest["files"]
    if len(alphas) != len(files):
        raise BridgeError("manifest alphas and files disagree in length")

    headers = {"Content-Type": VIBE_CONTENT_TYPE}
    api_key = os.environ.get(config.api_key_env)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    out_dir = Path(config.output_dir)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "decoded_path_dir": str(decoded_dir),
        "endpoint_url": config.endpoint_url,
        "realized_files": {},
        "failures": {},
    }
    last_call = 0.0
    for alpha, name in zip(alphas, files):
        key = f"{alpha:g}"
        out_name = f"realized_{key.replace('.', 'p').replace('-', 'm')}.vibe"
        try:
            payload = (decoded_dir / name).read_bytes()
            wait = rate_limit_s - (time.monotonic() - last_call)
            if wait > 0:
                time.sleep(wait)
            last_call = time.monotonic()
            response = _post_with_retry(config.endpoint_url, payload, headers, timeout)
            _write_realized(response, out_dir / out_name, alpha, config)
            manifest["realized_files"][key] = out_name
        except (OSError, BridgeError) as exc:
            logger.warning("alpha %s failed: %s", key, exc)
            manifest["failures"][key] = str(exc)
    (out_dir / "realize_manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
