"""
Django app configuration for the edge pipeline.
"""
from django.apps import AppConfig


class PipelineConfig(AppConfig):
    name = 'pipeline'
    verbose_name = 'Edge inference pipeline'
