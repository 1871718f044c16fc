"""
Empowerkit - Models

This module contains the database models for the application.
"""
from django.db import models


class RunRecord(models.Model):
    """
    Logs one invocation of a management command
    """
    COMMAND_CHOICES = [
        ('mi_bench', 'MI Benchmark'),
        ('train', 'Train'),
        ('eval', 'Evaluate'),
        ('oracle', 'Oracle Check'),
    ]

    STATUS_CHOICES = [
        ('ok', 'Succeeded'),
        ('failed', 'Failed'),
    ]

    command = models.CharField(max_length=20, choices=COMMAND_CHOICES)
    run_id = models.CharField(max_length=100, db_index=True)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES)
    exit_code = models.IntegerField(default=0)
    output_dir = models.CharField(max_length=500)
    config_text = models.TextField(blank=True, help_text="Resolved config in key = value form")
    details = models.TextField(blank=True)
    started_at = models.DateTimeField()
    finished_at = models.DateTimeField(auto_now_add=True)

    def __str__(self):
        return f"{self.get_command_display()} {self.run_id} ({self.status}) - {self.finished_at.strftime('%Y-%m-%d %H:%M')}"

    @property
    def succeeded(self):
        return self.exit_code == 0

    class Meta:
        ordering = ['-finished_at']
