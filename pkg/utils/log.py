#!/usr/bin/env python3

import logging
import os

ROOT_LOGGER = "lfc_analytics"


def debug_enabled() -> bool:
    """True when the entry point (or the caller) asked for verbose output"""
    return bool(os.environ.get("LFC_DEBUG"))


def get_logger(name: str) -> logging.Logger:
    """Named child of the toolkit logger, e.g. lfc_analytics.dynamics"""
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def configure_logging() -> None:
    """Attach a stderr handler to the toolkit logger; level follows LFC_DEBUG"""
    root = logging.getLogger(ROOT_LOGGER)
    root.setLevel(logging.DEBUG if debug_enabled() else logging.INFO)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
