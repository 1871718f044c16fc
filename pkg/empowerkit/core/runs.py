"""
Empowerkit - Runs

Run ids, output directories and run records shared by the management commands.
"""
import hashlib
import logging
from pathlib import Path

from django.conf import settings
from django.db import DatabaseError
from django.utils import timezone

from .models import RunRecord

logger = logging.getLogger(__name__)

ECHO_FILENAME = 'config.echo'


def run_id_for(command, echo_text):
    """<command>-<first 10 hex digits of sha1(resolved config)>."""
    return f"{command}-{hashlib.sha1(echo_text.encode('utf-8')).hexdigest()[:10]}"


def output_root():
    return Path(settings.EMPOWERKIT_OUT)


def prepare_run_dir(run_id, echo_text):
    """Create out/<run_id>/ and write the resolved config into it."""
    run_dir = output_root() / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / ECHO_FILENAME).write_text(echo_text)
    return run_dir


def record_run(command, run_id, run_dir, config_text, exit_code, started_at, details=''):
    """
    Store a RunRecord for a finished command.

    A database that is missing or unmigrated only costs the record.
    """
    try:
        return RunRecord.objects.create(
            command=command,
            run_id=run_id,
            status='ok' if exit_code == 0 else 'failed',
            exit_code=exit_code,
            output_dir=str(run_dir),
            config_text=config_text,
            details=details[:2000],
            started_at=started_at or timezone.now(),
        )
    except DatabaseError as exc:
        logger.warning("run record for %s not saved: %s", run_id, exc)
        return None
