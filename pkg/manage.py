#!/usr/bin/env python
"""Django's command-line entry point; `manage.py faster ...` runs the experiments."""
import os
import sys


def main(argv=None):
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'main_app.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError("Django is not importable; run `uv sync` first.") from exc
    execute_from_command_line(argv or sys.argv)


if __name__ == '__main__':
    main()
