import logging

from django.core.management.base import BaseCommand, CommandError

from Molecules.experiments import exit_code_for

logger = logging.getLogger(__name__)


class ExperimentCommand(BaseCommand):
    """
    Shared flags of the simulator commands and the translation of failures
    into one-line diagnostics with the documented exit codes.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Experiment configuration file (JSON).')
        parser.add_argument('--seed', type=int, help='Override the configured seed.')
        parser.add_argument('--deterministic', action='store_true',
                            help='Sequential clients and deterministic kernels for bitwise reproducibility.')
        parser.add_argument('--out', help='Output directory (or file for dump_samples).')

    def run(self, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except CommandError:
            raise
        except Exception as e:
            message = ' '.join(str(e).split()) or type(e).__name__
            logger.debug(f"{type(e).__name__}: {message}", exc_info=True)
            raise CommandError(f"{type(e).__name__}: {message}", returncode=exit_code_for(e))
