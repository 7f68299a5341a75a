"""Assemble a desk-scale English corpus from text already on the machine.

No download: docstrings of the running interpreter's standard library are
mostly English prose and add up to several megabytes.
"""

from __future__ import annotations

import ast
import sysconfig
from pathlib import Path


def stdlib_docstring_text(target_bytes: int = 1_000_000) -> str:
    """Concatenated standard-library docstrings, in sorted file order, truncated to ``target_bytes``."""
    root = Path(sysconfig.get_paths()["stdlib"])
    pieces: list[str] = []
    size = 0
    for path in sorted(root.rglob("*.py")):
        if any(part in {"test", "tests", "idlelib", "site-packages", "dist-packages"} for part in path.parts):
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError, OSError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 80 and doc.isascii():
                    pieces.append(doc.strip() + "\n\n")
                    size += len(pieces[-1])
        if size >= target_bytes:
            break
    return "".join(pieces)[:target_bytes]


def write_stdlib_corpus(path, target_bytes: int = 1_000_000) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(stdlib_docstring_text(target_bytes), encoding="utf-8")
    return p
