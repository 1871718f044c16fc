#!/usr/bin/env python
"""
Empowerkit command-line entry point.

    python manage.py mi_bench | train | eval | oracle [--config FILE] [--set KEY=VALUE ...]
"""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'empowerkit.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Install the project dependencies "
            "(pip install -e .) into the active environment."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
