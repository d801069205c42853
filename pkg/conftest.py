"""Configure Django for plain pytest runs (mirrors manage.py's setup)."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'FedMol_Simulator.settings')
django.setup()
