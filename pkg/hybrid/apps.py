from django.apps import AppConfig


class HybridConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'hybrid'
    verbose_name = 'Hybrid SNN-ANN Deployment Toolkit'
