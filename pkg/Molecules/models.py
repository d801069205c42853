"""
Run-configuration choices shared by the simulator modules, the serializers and
the management commands. The app keeps no database tables: runs, reports and
checkpoints live in the run directory.
"""
from django.db import models
from django.utils.translation import gettext_lazy as _


class PartitionMode(models.TextChoices):
    IID = 'iid', _('IID')
    NON_IID = 'noniid', _('Non-IID')


class LossForm(models.TextChoices):
    WGAN = 'wgan', _('WGAN-GP')
    LOG = 'log', _('Log (shifted)')


class EpsilonMode(models.TextChoices):
    UNIFORM = 'uniform', _('Per-sample uniform')
    FIXED = 'fixed', _('Fixed value')


class GenerationMode(models.TextChoices):
    SOFT = 'soft', _('Soft')
    HARD = 'hard', _('Hard (straight-through Gumbel)')
    CATEGORICAL = 'categorical', _('Categorical')


class AggregationWeighting(models.TextChoices):
    SAMPLES = 'samples', _('Sample-count weighted')
    UNIFORM = 'uniform', _('Uniform')


class SweepAxis(models.TextChoices):
    DISCRIMINATOR_DIMS = 'discriminator_dims', _('Discriminator Dimension')
    NUM_CLIENTS = 'num_clients', _('Number of Clients')
    DROPOUT = 'dropout', _('Dropout Ratio')


class DatasetPreset(models.TextChoices):
    ESOL = 'esol', _('ESOL')
    QM8 = 'qm8', _('QM8')
    QM9 = 'qm9', _('QM9')
