from django.db import models


class TrainingRun(models.Model):
    STATUS_CHOICES = [
        ("PENDING", "Pending"),
        ("RUNNING", "Running"),
        ("DONE", "Done"),
        ("FAILED", "Failed"),
    ]
    ESTIMATORS = [
        ("control_variate", "Control variate"),
        ("joint_score", "Joint score"),
        ("pathwise", "Pathwise"),
    ]

    dataset_dir = models.CharField(max_length=512)
    output_dir = models.CharField(max_length=512)
    estimator = models.CharField(max_length=20, choices=ESTIMATORS, default="control_variate")
    seed = models.BigIntegerField(default=0)
    config_json = models.JSONField(default=dict, blank=True)
    status = models.CharField(max_length=12, choices=STATUS_CHOICES, default="PENDING")
    iteration = models.PositiveIntegerField(default=0)
    final_psnr = models.FloatField(blank=True, null=True)
    error_message = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    completed_at = models.DateTimeField(blank=True, null=True)

    class Meta:
        ordering = ["-created_at"]

    def __str__(self) -> str:
        return f"Run {self.id} ({self.dataset_dir}, {self.status})"
