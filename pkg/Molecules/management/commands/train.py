from django.core.management.base import CommandError

from Molecules.experiments import cmd_train

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Run a federated training experiment and write its run directory.'

    def run(self, **options):
        if not options['config']:
            raise CommandError('--config is required', returncode=2)
        run_dir = cmd_train(options['config'], options['seed'], options['deterministic'], options['out'])
        self.stdout.write(self.style.SUCCESS(f"Run directory: {run_dir}"))
