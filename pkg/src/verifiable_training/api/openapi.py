"""Render the gateway's OpenAPI document.

``python -m verifiable_training.api.openapi docs/openapi.json``
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path
from typing import Any

from ..service import Platform, Settings
from ..signing import KeyPair
from .app import create_app


def openapi_document() -> dict[str, Any]:
    # the schema depends only on the routes, so a throwaway platform is enough
    with tempfile.TemporaryDirectory() as tmp:
        platform = Platform(Settings(data_dir=Path(tmp), workers=0), key=KeyPair.generate())
        return create_app(platform).openapi()


def render() -> str:
    return json.dumps(openapi_document(), indent=2, sort_keys=True) + "\n"


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    text = render()
    if argv:
        Path(argv[0]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
