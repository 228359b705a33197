from django.apps import AppConfig


class ProbabilityConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'probability'
    verbose_name = 'Hashed probability pyramid'
