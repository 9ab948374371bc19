"""Input validation for aptdiff.

Token, caption-template and file-name checks, path confinement for
run directories, and scrubbing of error messages before they are
reported by the command line.
"""

from __future__ import annotations

import logging
import re
from pathlib import Path

from aptdiff.constants import PLACEHOLDER, TOKEN_RE

# Maximum caption template length in characters
MAX_TEMPLATE_SIZE = 512

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


def validate_token(token: str) -> str:
    """Validate a single vocabulary token.

    Args:
        token: The token string to validate.

    Returns:
        The token (unchanged) if valid.

    Raises:
        ValueError: If the token is empty, contains whitespace or braces.
    """
    if not token:
        raise ValueError("Token must not be empty")
    if not TOKEN_RE.match(token):
        raise ValueError(
            f"Token '{token}' contains disallowed characters "
            "(whitespace and braces are reserved)"
        )
    return token


def validate_caption_template(template: str) -> str:
    """Check a caption template for size and placeholder count.

    Raises:
        ValueError: If the template is empty, too long, or does not contain
            exactly one standalone ``{}`` placeholder.
    """
    if not template or not template.strip():
        raise ValueError("Caption template must not be empty")
    if len(template) > MAX_TEMPLATE_SIZE:
        raise ValueError(
            f"Caption template too large: {len(template)} chars "
            f"(max {MAX_TEMPLATE_SIZE})"
        )
    words = template.split()
    count = sum(1 for w in words if w == PLACEHOLDER)
    if count != 1:
        raise ValueError(
            f"Caption template must contain exactly one '{PLACEHOLDER}' "
            f"placeholder word, found {count}: {template!r}"
        )
    return template


def validate_name(name: str) -> str:
    """Validate a stored-object name (checkpoint, run, variant)."""
    if not name:
        raise ValueError("Name must not be empty")
    if not _NAME_RE.match(name) or ".." in name:
        raise ValueError(
            f"Invalid name '{name}': use letters, digits, '_', '-', '.' only"
        )
    return name


def safe_path(base_dir: Path, user_input: str) -> Path:
    """Resolve a path and ensure it stays within base_dir.

    Raises:
        ValueError: If the resolved path escapes base_dir.
    """
    resolved = (base_dir / user_input).resolve()
    if not resolved.is_relative_to(base_dir.resolve()):
        raise ValueError("Path traversal attempt blocked")
    return resolved


# ---------------------------------------------------------------------------
# Error sanitization: strip local paths from messages printed by the CLI
# ---------------------------------------------------------------------------

_PATH_RE = re.compile(r"/(?:home|tmp|usr|etc|var|root)[^\s:,)'\"]*")


def sanitize_error(exc: Exception) -> str:
    """Convert an exception to a string with filesystem paths scrubbed."""
    message = str(exc)
    if isinstance(exc, KeyError) and exc.args:
        message = str(exc.args[0])
    return _PATH_RE.sub("<path>", message)


def safe_error_response(
    exc: Exception, logger: logging.Logger, context: str = ""
) -> dict:
    """Log the full exception at DEBUG and return a sanitized error dict."""
    logger.debug("Error in %s: %s", context, exc, exc_info=True)
    return {
        "status": "error",
        "error_type": type(exc).__name__,
        "error": sanitize_error(exc),
    }
