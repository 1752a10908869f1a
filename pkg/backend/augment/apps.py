from django.apps import AppConfig


class AugmentConfig(AppConfig):
    name = 'augment'
    verbose_name = 'Day-to-night augmentation'
    default_auto_field = 'django.db.models.BigAutoField'
