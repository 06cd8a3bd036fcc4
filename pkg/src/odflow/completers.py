"""
Argcomplete completer functions for the odflow CLI.

These functions provide dynamic tab completion for cell ids, read from the
cells manifest or the ingest cache, and file path completion for configs.
"""

import os
import signal
from functools import wraps

from argcomplete.completers import FilesCompleter


def safe_completer(func):
    """
    Decorator to wrap completer functions with error handling.

    Ensures that completers never raise exceptions that would break the CLI.
    All errors are silently caught and an empty list is returned.
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception:
            # Silent failure - return empty list on any error
            return []
    return wrapper


class TimeoutError(Exception):
    """Raised when a completion operation times out."""
    pass


def timeout_handler(signum, frame):
    """Signal handler for timeout."""
    raise TimeoutError("Operation timed out")


def _cell_ids(parsed_args) -> list[str]:
    # Import here to keep pandas out of the completion start-up path
    from odflow.geo import load_cells
    from odflow.io.cache import read_component

    cells_path = getattr(parsed_args, "cells", None)
    if cells_path:
        return sorted(load_cells(cells_path))

    cache_dir = getattr(parsed_args, "cache", None) or "odflow-cache"
    component_path = os.path.join(cache_dir, "component.json")
    if os.path.exists(component_path):
        return list(read_component(component_path).cells)
    return []


@safe_completer
def cell_completer(prefix, parsed_args, **kwargs):
    """
    Complete cell ids.

    Used for:
    - odflow root --cell <id>

    Cells come from the --cells manifest when given, otherwise from the
    component stored in the --cache directory.

    Args:
        prefix: The current prefix being completed
        parsed_args: Parsed arguments from argparse
        **kwargs: Additional arguments from argcomplete

    Returns:
        List of cell ids matching the prefix
    """
    # Set up 2-second timeout
    signal.signal(signal.SIGALRM, timeout_handler)
    signal.alarm(2)

    try:
        cells = _cell_ids(parsed_args)
        if prefix:
            cells = [c for c in cells if c.startswith(prefix)]
        return cells

    except TimeoutError:
        return []
    finally:
        # Cancel alarm
        signal.alarm(0)


def config_file_completer(prefix, parsed_args, **kwargs):
    """
    Complete config file paths for -f/--config flags.

    Delegates to argcomplete's built-in FilesCompleter for file path completion.
    """
    return FilesCompleter()(prefix, **kwargs)
