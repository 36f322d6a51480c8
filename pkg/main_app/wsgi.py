"""
WSGI entry point for the timing analysis API (`/api/v1/pipeline/...`).
`manage.py runserver` uses it through WSGI_APPLICATION.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'main_app.settings')

application = get_wsgi_application()
