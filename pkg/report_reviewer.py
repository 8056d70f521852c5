# report_reviewer.py - quality review of experiment reports
from experiment_pipeline import CheckRow, ExperimentReport
from typing import Dict, List, Optional
import math
import pandas as pd


class ReportReviewer:
    """Review experiment reports before they are archived or compared"""

    def __init__(self):
        self.quality_thresholds = {
            'tight_margin': 0.8,          # share of the tolerance used by |estimate - target|
            'max_se_to_tolerance': 1.0,   # an SE this large against the tolerance makes a check weak
            'min_rows': 1,
            'required_fields': ['name', 'estimate', 'target', 'tolerance', 'status']
        }

    def _margin_used(self, row: CheckRow) -> float:
        """Fraction of the tolerance consumed; above 1 means the check failed"""
        if row.relation == 'abs':
            gap = abs(row.estimate - row.target)
        elif row.relation == 'ge':
            gap = max(row.target - row.estimate, 0.0)
        else:
            gap = max(row.estimate - row.target, 0.0)
        if row.tolerance > 0:
            return gap / row.tolerance
        return 0.0 if gap == 0 else math.inf

    def analyze_report(self, report: ExperimentReport) -> Dict:
        """Analyze one report and provide quality metrics"""

        analysis = {
            'experiment': report.experiment,
            'total_checks': len(report.rows),
            'passed': 0,
            'failed': 0,
            'exact_rows': 0,
            'se_rows': 0,
            'unmarked_rows': 0,
            'status_consistent': True,
            'quality_issues': [],
            'recommendations': [],
            'detailed_stats': {}
        }

        quality_scores = []
        margins = []

        for i, row in enumerate(report.rows, 1):
            if row.status:
                analysis['passed'] += 1
            else:
                analysis['failed'] += 1
                analysis['quality_issues'].append({
                    'item': i,
                    'name': row.name,
                    'issue': f"Check failed: {row.estimate:.6g} vs {row.target:.6g} (tol {row.tolerance:.3g})"
                })

            if row.exact:
                analysis['exact_rows'] += 1
            elif row.se is not None:
                analysis['se_rows'] += 1
            else:
                analysis['unmarked_rows'] += 1
                analysis['quality_issues'].append({
                    'item': i,
                    'name': row.name,
                    'issue': 'Numeric cell without SE or exact marker'
                })

            quality_scores.append(self._assess_row_quality(row))
            margin = self._margin_used(row)
            if math.isfinite(margin):
                margins.append(margin)

        analysis['status_consistent'] = report.passed == (
            analysis['total_checks'] >= self.quality_thresholds['min_rows'] and analysis['failed'] == 0)

        if quality_scores:
            analysis['detailed_stats'] = {
                'average_quality_score': sum(quality_scores) / len(quality_scores),
                'average_margin_used': sum(margins) / len(margins) if margins else 0.0,
                'tight_count': len([m for m in margins if self.quality_thresholds['tight_margin'] < m <= 1.0]),
                'comfortable_count': len([m for m in margins if m <= 0.5])
            }

        analysis['recommendations'] = self._generate_recommendations(analysis, report)

        return analysis

    def _assess_row_quality(self, row: CheckRow) -> float:
        """Score a single check between 0 and 1"""
        quality_score = 1.0

        if not row.status:
            quality_score -= 0.5

        if not row.exact and row.se is None:
            quality_score -= 0.3

        margin = self._margin_used(row)
        if row.status and margin > self.quality_thresholds['tight_margin']:
            quality_score -= 0.2

        # an SE comparable to the tolerance means the check cannot tell much apart
        if row.se is not None and row.tolerance > 0 and row.relation == 'abs':
            if row.se > self.quality_thresholds['max_se_to_tolerance'] * row.tolerance:
                quality_score -= 0.2

        return max(0.0, min(1.0, quality_score))

    def _generate_recommendations(self, analysis: Dict, report: ExperimentReport) -> List[str]:
        """Generate actionable recommendations based on analysis"""
        recommendations = []

        failing = [row for row in report.rows if not row.status]
        for row in failing[:5]:
            if row.se is not None and not row.exact:
                recommendations.append(
                    f"'{row.name}' failed by {abs(row.estimate - row.target) / max(row.se, 1e-300):.1f} SE. "
                    "Rerun with another --seed and more --paths before suspecting the model.")
            else:
                recommendations.append(f"'{row.name}' is an exact check and failed. Inspect the model config.")

        if analysis.get('unmarked_rows', 0) > 0:
            recommendations.append("Some rows carry neither an SE nor an exact marker.")

        if not analysis.get('status_consistent', True):
            recommendations.append("Overall status disagrees with the row statuses.")

        stats = analysis.get('detailed_stats', {})
        if stats.get('tight_count', 0) > 0:
            recommendations.append(
                f"{stats['tight_count']} passing checks used more than "
                f"{self.quality_thresholds['tight_margin']:.0%} of their tolerance.")

        if analysis.get('total_checks', 0) < self.quality_thresholds['min_rows']:
            recommendations.append("Report has no checks.")

        if not recommendations:
            recommendations.append("All checks passed with margin. Report is ready to archive.")

        return recommendations

    def generate_quality_report(self, report: ExperimentReport, output_file: Optional[str] = None) -> str:
        """Generate a detailed quality report"""

        analysis = self.analyze_report(report)
        total = analysis['total_checks']

        text = f"""
📊 EXPERIMENT QUALITY REPORT: {report.experiment}
{'=' * 50}

📈 SUMMARY STATISTICS:
• Config digest: {report.config_digest}
• Total checks: {total}
• Passed: {analysis['passed']}
• Failed: {analysis['failed']}
• Rows with SE: {analysis['se_rows']}
• Exact rows: {analysis['exact_rows']}
• Unmarked rows: {analysis['unmarked_rows']}
• Wall clock: {report.wall_clock:.1f}s
"""

        if analysis['detailed_stats']:
            stats = analysis['detailed_stats']
            text += f"""
⭐ QUALITY METRICS:
• Average quality score: {stats['average_quality_score']:.2f}/1.0
• Average tolerance used: {stats['average_margin_used']:.1%}
• Tight passes: {stats['tight_count']}
• Comfortable passes: {stats['comfortable_count']}
"""
        else:
            text += "\n• No quality metrics available (report has no rows)\n"

        text += """
🔧 RECOMMENDATIONS:
"""
        for i, rec in enumerate(analysis['recommendations'], 1):
            text += f"{i}. {rec}\n"

        if analysis['quality_issues']:
            text += """
⚠️  QUALITY ISSUES FOUND:
"""
            for issue in analysis['quality_issues'][:10]:
                text += f"• Row {issue['item']}: {issue['name'][:40]} - {issue['issue']}\n"

            if len(analysis['quality_issues']) > 10:
                text += f"... and {len(analysis['quality_issues']) - 10} more issues.\n"

        text += f"""
{'=' * 50}
"""

        if output_file:
            with open(output_file, 'w', encoding='utf-8') as f:
                f.write(text)

        return text

    def export_detailed_csv(self, report: ExperimentReport, filename: str) -> pd.DataFrame:
        """Export rows with their quality information"""

        export_data = []

        for i, row in enumerate(report.rows, 1):
            record = {'item_number': i}
            record.update(row.to_dict())
            record['margin_used'] = self._margin_used(row)
            record['quality_score'] = self._assess_row_quality(row)
            export_data.append(record)

        df = pd.DataFrame(export_data)
        df.to_csv(filename, index=False, encoding='utf-8')

        return df
