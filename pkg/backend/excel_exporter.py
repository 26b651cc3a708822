"""
Excel Exporter - Evaluation report and loss curves as a workbook
"""

import logging
import os

from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill

logger = logging.getLogger(__name__)

HEADER_FILL = PatternFill(start_color="4F46E5", end_color="4F46E5", fill_type="solid")
HEADER_FONT = Font(color="FFFFFF", bold=True, size=12)


class ExcelExporter:
    def _header(self, ws, titles):
        for col, title in enumerate(titles, start=1):
            cell = ws.cell(row=1, column=col, value=title)
            cell.fill = HEADER_FILL
            cell.font = HEADER_FONT
            cell.alignment = Alignment(horizontal="center")

    def export_report(self, report, path, loss_curves=None):
        """
        Sheets: Overview (scalar metrics), Overlap (retriever x retriever),
        Seed Ages (histogram bins), Loss Curve (one column per trained model)
        """
        wb = Workbook()

        ws1 = wb.active
        ws1.title = "Overview"
        self._header(ws1, ["Metric", "Value"])
        metrics = [
            ("Users", report.users),
            ("Interest coverage", report.interest_coverage),
            ("Uniqueness vs baseline", report.uniqueness),
            ("Long-tail share delta", report.longtail_share_delta),
            ("Consumed long-tail coverage", report.longtail_consumed_coverage),
        ]
        metrics += [(f"Coverage: {k}", v) for k, v in sorted(report.coverage_breakdown.items())]
        metrics += [(f"Long-tail share: {k}", v) for k, v in sorted(report.longtail_share.items())]
        metrics += [(f"Median seed age: {k}", v) for k, v in sorted(report.median_seed_age_days.items())]
        for row, (metric, value) in enumerate(metrics, start=2):
            ws1.cell(row=row, column=1, value=metric)
            ws1.cell(row=row, column=2, value=value).font = Font(bold=True)
        ws1.column_dimensions["A"].width = 34
        ws1.column_dimensions["B"].width = 16

        ws2 = wb.create_sheet("Overlap")
        names = list(report.overlap_matrix)
        self._header(ws2, [""] + names)
        for row, a in enumerate(names, start=2):
            ws2.cell(row=row, column=1, value=a).font = Font(bold=True)
            for col, b in enumerate(names, start=2):
                ws2.cell(row=row, column=col, value=report.overlap_matrix[a][b])

        ws3 = wb.create_sheet("Seed Ages")
        self._header(ws3, ["Age (days)", "Share of seeds"])
        for row, (label, value) in enumerate(report.seed_age_histogram.items(), start=2):
            ws3.cell(row=row, column=1, value=label)
            ws3.cell(row=row, column=2, value=value)

        ws4 = wb.create_sheet("Loss Curve")
        curves = loss_curves or {}
        self._header(ws4, ["Batch"] + list(curves))
        longest = max((len(c) for c in curves.values()), default=0)
        for i in range(longest):
            ws4.cell(row=i + 2, column=1, value=i)
            for col, curve in enumerate(curves.values(), start=2):
                if i < len(curve):
                    ws4.cell(row=i + 2, column=col, value=float(curve[i]))

        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        wb.save(path)
        logger.info(f"📊 Excel export: {path}")
        return path


excel_exporter = ExcelExporter()
