#!/usr/bin/env python
"""Command-line entry point: gen_data, train, evaluate, simulate_hw and profile."""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Install the project with `poetry install` "
            "and run it inside that environment."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
