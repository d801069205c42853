from django.apps import AppConfig


class MoleculesConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'Molecules'
    verbose_name = 'Federated molecular GAN simulator'
