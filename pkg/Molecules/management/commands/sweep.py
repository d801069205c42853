from django.core.management.base import CommandError

from Molecules.experiments import cmd_sweep

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Train once per value of the configured sweep axis and write the combined table.'

    def run(self, **options):
        if not options['config']:
            raise CommandError('--config is required', returncode=2)
        table = cmd_sweep(options['config'], options['seed'], options['deterministic'], options['out'])
        self.stdout.write(table.read_text(encoding='utf-8'), ending='')
