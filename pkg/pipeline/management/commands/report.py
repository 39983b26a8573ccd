from pipeline import services
from pipeline.management.base import PipelineCommand
from pipeline.reports import emit_accuracy, emit_report


class Command(PipelineCommand):
    help = 'Render stored benchmark records as a latency table or an accuracy-across-formats table.'
    subcommand = 'report'
    flags = ('reports', 'seed', 'output_format', 'output')

    def add_command_arguments(self, parser):
        parser.add_argument('--kind', choices=('latency', 'accuracy'), default='latency')

    def run(self, config, options):
        reports = [services.load_report(path) for path in config.reports]
        emitter = emit_accuracy if options['kind'] == 'accuracy' else emit_report
        self.emit(emitter(reports, config.output_format), config)
