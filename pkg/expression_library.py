"""
Expression Library for ratspec

Handles loading, validating, and listing the expression files shipped in the
expressions directory.
"""

import logging
import os
import shutil
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from expr_core import RationalExpr, Signature, shape
from expr_parser import load_expr_file, render

logger = logging.getLogger(__name__)

EXPR_SUFFIX = ".expr"


class ExpressionLibrary:
    """Manages named expression files."""

    def __init__(self, expressions_dir: Optional[str] = None):
        """Initialize the library.

        Args:
            expressions_dir: Directory where expression files are stored; defaults
                to ``RATSPEC_EXPRESSIONS_DIR`` or ``expressions``
        """
        self.expressions_dir = expressions_dir or os.getenv("RATSPEC_EXPRESSIONS_DIR", "expressions")
        self.expressions: Dict[str, Dict[str, Any]] = {}
        self._load_expressions()

    def _ensure_dir_exists(self):
        os.makedirs(self.expressions_dir, exist_ok=True)

    def _load_expressions(self):
        """Load every ``.expr`` file; broken files are logged and skipped."""
        if not Path(self.expressions_dir).is_dir():
            logger.info("No expression directory at %s", self.expressions_dir)
            return
        for file_path in sorted(Path(self.expressions_dir).glob(f"*{EXPR_SUFFIX}")):
            try:
                self.expressions[file_path.stem] = self._load_expression_file(file_path)
            except Exception as e:
                logger.warning("Error loading expression %s: %s", file_path, e)

    def _load_expression_file(self, file_path: Path) -> Dict[str, Any]:
        expr, signature = load_expr_file(file_path)
        return {
            "expr": expr,
            "signature": signature,
            "description": _description(file_path),
            "path": str(file_path),
        }

    def get_expression(self, name: str) -> Tuple[RationalExpr, Signature]:
        """Get an expression and its signature by name.

        Raises:
            ValueError: If the name doesn't exist
        """
        if name not in self.expressions:
            raise ValueError(f"Expression not found: {name}")
        entry = self.expressions[name]
        return entry["expr"], entry["signature"]

    def list_expressions(self) -> Dict[str, Dict[str, Any]]:
        """List all expressions with display metadata."""
        result = {}
        for name, entry in self.expressions.items():
            rows, cols = shape(entry["expr"])
            result[name] = {
                "name": name,
                "text": render(entry["expr"]),
                "signature": str(entry["signature"]),
                "shape": [rows, cols],
                "description": entry["description"],
                "path": entry["path"],
            }
        return result

    def add_expression(self, file_path: str) -> str:
        """Copy an expression file into the library and load it.

        Returns:
            Name of the added expression

        Raises:
            ValueError: If the file doesn't exist or is invalid
        """
        path = Path(file_path)
        if not path.exists():
            raise ValueError(f"File not found: {file_path}")
        entry = self._load_expression_file(path)
        self._ensure_dir_exists()
        target_path = Path(self.expressions_dir) / f"{path.stem}{EXPR_SUFFIX}"
        if path.resolve() != target_path.resolve():
            shutil.copyfile(path, target_path)
        entry["path"] = str(target_path)
        self.expressions[path.stem] = entry
        return path.stem


def _description(file_path: Path) -> str:
    for line in file_path.read_text(encoding="utf-8").splitlines():
        stripped = line.strip()
        if stripped.startswith("#"):
            return stripped.lstrip("#").strip()
        if stripped:
            break
    return ""


def find_expression_file(name: str, expressions_dir: Optional[str] = None) -> Optional[Path]:
    """Path of the library file named ``name``, without loading the library."""
    directory = Path(expressions_dir or os.getenv("RATSPEC_EXPRESSIONS_DIR", "expressions"))
    if not name.isidentifier():
        return None
    path = directory / f"{name}{EXPR_SUFFIX}"
    return path if path.is_file() else None
