/** Presentation helpers. Values arrive from the service and pass through
 * as-is; these helpers only decorate, never derive. */

import type { CriterionName, SessionView } from './api.js';

export function budgetMeter(session: SessionView): string {
  return `${session.remaining_budget} of ${session.budget_limit} queries remaining`;
}

export function windowCountdown(session: SessionView, nowIso: string): string {
  const deadline = Date.parse(session.window_deadline);
  const now = Date.parse(nowIso);
  if (Number.isNaN(deadline) || Number.isNaN(now) || now > deadline) {
    return 'testing window closed';
  }
  const days = Math.floor((deadline - now) / 86_400_000);
  if (days === 0) {
    return 'testing window closes today';
  }
  return `${days} day${days === 1 ? '' : 's'} left in testing window`;
}

export function signed(value: number): string {
  return value > 0 ? `+${value}` : `${value}`;
}

export const CRITERION_BADGES: Record<CriterionName, string> = {
  outcome_crossing: 'outcome crossed',
  percentile_shift: 'large shift',
  threshold_proximate: 'near-cutoff shift',
  pattern_consistent: 'consistent pattern',
};

export function escapeHtml(value: unknown): string {
  return String(value)
    .replaceAll('&', '&amp;')
    .replaceAll('<', '&lt;')
    .replaceAll('>', '&gt;')
    .replaceAll('"', '&quot;')
    .replaceAll("'", '&#39;');
}
