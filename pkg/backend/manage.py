#!/usr/bin/env python
"""Command-line entry point for the nightshift augmentation pipeline.

    python manage.py train --config configs/toy.yaml --day data/toy/day/manifest.jsonl --night data/toy/night/manifest.jsonl
    python manage.py test augment
"""
import os
import sys


def main():
    """Dispatch to a management command (train, translate, curate, evaluate, ...)."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nightshift.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Install the packages from requirements.txt "
            "into the active environment."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
