#!/usr/bin/env python3
"""
UniKD Logging
Structured event logging plus the emoji console helpers used by the CLI
"""

import logging
import os
import sys
from typing import Optional

import structlog
from rich.console import Console
from rich.markup import escape

_console = Console(stderr=True, highlight=False)
_configured = False


def configure_logging(level: str = "INFO", json_output: Optional[bool] = None) -> None:
    """Configure structlog on top of stdlib logging (idempotent)"""
    global _configured
    if _configured:
        return

    if json_output is None:
        json_output = os.environ.get("UNIKD_LOG_JSON", "0") == "1"

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(message)s",
        stream=sys.stderr,
    )

    renderer = structlog.processors.JSONRenderer() if json_output else structlog.dev.ConsoleRenderer(colors=False)
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            renderer,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )
    _configured = True


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    return structlog.get_logger(name)


def log_info(message: str) -> None:
    _console.print(f"[blue]ℹ️  {escape(message)}[/blue]")


def log_success(message: str) -> None:
    _console.print(f"[green]✅ {escape(message)}[/green]")


def log_warning(message: str) -> None:
    _console.print(f"[yellow]⚠️  {escape(message)}[/yellow]")


def log_error(message: str) -> None:
    _console.print(f"[red]❌ {escape(message)}[/red]")


def log_step(message: str) -> None:
    _console.print(f"[cyan]🔄 {escape(message)}[/cyan]")


def console() -> Console:
    return _console
