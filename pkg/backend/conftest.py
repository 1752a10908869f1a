import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nightshift.settings')
django.setup()
