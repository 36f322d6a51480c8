"""
URL configuration for main_app project.

Every endpoint lives under /api/v1/; responses use the SER envelope
(see core/utils/response_models.py).
"""
from django.urls import path, include

urlpatterns = [
    # API v1 endpoints
    path('api/v1/', include('pipeline.urls')),
]
