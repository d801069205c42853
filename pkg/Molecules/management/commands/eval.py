from django.core.management.base import CommandError

from Molecules.experiments import cmd_eval

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Evaluate a checkpoint: sample molecules and score them against the training split.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True, help='Checkpoint file written by train.')
        parser.add_argument('--samples', type=int, default=256, help='Number of molecules to generate.')

    def run(self, **options):
        if not options['config']:
            raise CommandError('--config is required', returncode=2)
        seed = options['seed'] if options['seed'] is not None else 0
        _, text = cmd_eval(options['checkpoint'], options['config'], options['samples'], seed, options['out'])
        self.stdout.write(text, ending='')
