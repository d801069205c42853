#!/usr/bin/env python
"""Django's command-line utility; the simulator's verbs are management commands.

    python manage.py train --config run.json
    python manage.py eval --checkpoint final.ckpt --config run.json --samples 256
    python manage.py sweep --config sweep.json
    python manage.py dump_samples --checkpoint final.ckpt --samples 10 --out samples.smi
"""
import os
import sys


def main():
    """Run administrative tasks."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'FedMol_Simulator.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
