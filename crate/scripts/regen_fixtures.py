#!/usr/bin/env python3
"""Regenerate the checked-in `.ast.json` fixtures.

Needs `solc-0.4.26` and `solc-0.8.23` executables (native solc or the
solc-js wrappers from scripts/install_solcjs.sh) in $PONZILENS_SOLC_DIR.
"""
import json
import os
import pathlib
import subprocess
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"
SOLC_DIR = pathlib.Path(os.environ.get("PONZILENS_SOLC_DIR", "/tmp/solc"))


def compiler_for(source: str) -> str:
    return "0.4.26" if "pragma solidity ^0.4" in source else "0.8.23"


def compile_one(path: pathlib.Path) -> dict:
    source = path.read_text()
    version = compiler_for(source)
    request = {
        "language": "Solidity",
        "sources": {path.name: {"content": source}},
        "settings": {"outputSelection": {"*": {"": ["ast"]}}},
    }
    out = subprocess.run(
        [str(SOLC_DIR / f"solc-{version}"), "--standard-json"],
        input=json.dumps(request), capture_output=True, text=True, check=True,
    )
    result = json.loads(out.stdout)
    errors = [e for e in result.get("errors", []) if e.get("severity") == "error"]
    if errors:
        raise SystemExit(f"{path.name}: {errors[0]['formattedMessage']}")
    entry = result["sources"][path.name]
    return {
        "compiler": version,
        "sources": {path.name: {"id": entry.get("id", 0), "content": source, "ast": entry["ast"]}},
    }


def main() -> None:
    names = sys.argv[1:] or sorted(p.name for p in ROOT.glob("*.sol"))
    for name in names:
        path = ROOT / name
        doc = compile_one(path)
        target = path.with_suffix(".ast.json")
        target.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        print(f"wrote {target.name}")


if __name__ == "__main__":
    main()
