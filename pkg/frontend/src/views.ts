/**
 * Render functions: service responses in, HTML strings out.
 *
 * Deliberately dumb. Deltas, percentiles, badges, and plain-language lines
 * are printed exactly as the service sent them; the regulator's wording
 * contract would be broken by any client-side rewriting.
 */

import type {
  FindingView,
  InstanceView,
  QueryView,
  ReportView,
  SessionView,
  SuiteResponse,
} from './api.js';
import { budgetMeter, CRITERION_BADGES, escapeHtml, signed, windowCountdown } from './format.js';

export function renderDashboard(session: SessionView, nowIso: string): string {
  const lines: string[] = ['<section class="dashboard">'];
  lines.push(`<h2>Session ${escapeHtml(session.session_id)}</h2>`);
  lines.push(
    `<p class="decision">Decision <strong>${escapeHtml(session.decision_id)}</strong>` +
      ` · model version <strong>${escapeHtml(session.model_version)}</strong></p>`,
  );
  if (session.spoliation_flag) {
    lines.push(
      '<p class="banner spoliation" role="alert">The model version that made this decision ' +
        'was not retained. The presumption favors you; export this report for your appeal.</p>',
    );
  }
  lines.push(`<p class="meter" data-meter>${escapeHtml(budgetMeter(session))}</p>`);
  lines.push(`<p class="countdown">${escapeHtml(windowCountdown(session, nowIso))}</p>`);
  if (session.state !== 'open') {
    lines.push(
      `<p class="banner readonly">This session is ${escapeHtml(session.state)}: ` +
        'testing is disabled, but the report can still be viewed and exported.</p>',
    );
  }
  lines.push('</section>');
  return lines.join('\n');
}

function describeChange(instance: InstanceView): string {
  if (instance.status === 'custom_pending' || instance.substituted_value === '__removed__') {
    // removals arrive with the removal marker as substituted_value
  }
  if (instance.substituted_value === '__removed__') {
    return `${instance.field} entry removed`;
  }
  return `${instance.field}: ${String(instance.original_value)} → ${String(
    instance.substituted_value,
  )}`;
}

export function renderBuilder(
  suite: SuiteResponse,
  isCached: (instance: InstanceView) => boolean,
): string {
  const lines: string[] = ['<section class="builder">', '<h2>Changes to test</h2>'];
  for (const warning of suite.warnings) {
    lines.push(`<p class="banner warning">${escapeHtml(warning)}</p>`);
  }
  lines.push('<ul class="suite">');
  for (const instance of suite.instances) {
    const notes: string[] = [];
    if (instance.status === 'custom_pending') {
      notes.push('<span class="watermark">pending adjudicator relevance</span>');
    }
    if (isCached(instance)) {
      notes.push('<span class="cached-hint">already run: cached, costs no query</span>');
    }
    lines.push(
      `<li data-instance-id="${escapeHtml(instance.instance_id)}">` +
        `<button class="run" data-run="${escapeHtml(instance.instance_id)}">Test</button> ` +
        `<strong>${escapeHtml(instance.label ?? instance.class_id)}</strong> ` +
        `<span class="change">${escapeHtml(describeChange(instance))}</span> ` +
        `${notes.join(' ')}` +
        `<p class="rationale">${escapeHtml(instance.rationale ?? '')}</p>` +
        '</li>',
    );
  }
  lines.push('</ul>', '</section>');
  return lines.join('\n');
}

function badgesFor(resultId: string, findings: FindingView[]): string {
  const badges = findings
    .filter((finding) => finding.supporting_results.includes(resultId))
    .map(
      (finding) =>
        `<span class="badge badge-${finding.criterion}">${escapeHtml(
          CRITERION_BADGES[finding.criterion],
        )}</span>`,
    );
  return badges.join(' ');
}

export function renderResults(rows: QueryView[], report: ReportView | null): string {
  const lines: string[] = ['<section class="results">', '<h2>Results</h2>'];
  if (rows.length === 0 && (!report || report.queries.length === 0)) {
    lines.push('<p class="empty">No queries run yet.</p>');
  } else {
    const source = report ? report.queries : rows;
    const findings = report ? report.findings : [];
    lines.push(
      '<table class="result-table"><thead><tr>' +
        '<th>change</th><th>score</th><th>score Δ</th><th>percentile Δ</th><th>findings</th>' +
        '</tr></thead><tbody>',
    );
    for (const row of source) {
      lines.push(
        `<tr data-result-id="${escapeHtml(row.instance.instance_id)}">` +
          `<td>${escapeHtml(describeChange(row.instance))}</td>` +
          `<td>${escapeHtml(`${row.baseline.score} → ${row.perturbed.score}`)}</td>` +
          `<td class="delta">${escapeHtml(signed(row.score_delta))}</td>` +
          `<td class="delta">${escapeHtml(signed(row.percentile_delta))}</td>` +
          `<td>${badgesFor(row.instance.instance_id, findings)}</td>` +
          '</tr>',
      );
    }
    lines.push('</tbody></table>');
  }

  if (report) {
    lines.push('<section class="plain-language"><h3>What this means</h3><ul>');
    for (const line of report.plain_language) {
      lines.push(`<li>${escapeHtml(line)}</li>`);
    }
    lines.push('</ul></section>');
    if (report.findings.length === 0) {
      lines.push(
        '<p class="retry" data-retry>No grounds found. ' +
          '<a href="#builder">Retry with different changes</a> within your remaining budget.</p>',
      );
    }
    lines.push(
      '<button class="export" data-export>Export evidence package (report.json)</button>',
    );
  }
  lines.push('</section>');
  return lines.join('\n');
}
