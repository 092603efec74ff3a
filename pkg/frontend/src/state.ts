/**
 * Portal session store.
 *
 * Optimistic UI is reconciled against authoritative service state on every
 * response: the session object displayed is always the most recent one the
 * service returned, and query rows are exactly the QueryView bodies it
 * sent back. Nothing is derived locally.
 */

import {
  ApiClient,
  type InstancePayload,
  type InstanceView,
  type QueryView,
  type ReportView,
  type SessionView,
  type SuiteResponse,
} from './api.js';

function contentKey(classId: string, field: string, substituted: unknown, remove: boolean): string {
  return JSON.stringify([classId, field, remove ? '__removed__' : substituted]);
}

export class PortalStore {
  session: SessionView | null = null;
  suite: SuiteResponse | null = null;
  rows: QueryView[] = [];
  report: ReportView | null = null;
  lastReplayed = false;
  private readonly ran = new Set<string>();

  constructor(private readonly api: ApiClient) {}

  private reconcile(session: SessionView): void {
    this.session = session;
  }

  async open(decisionId: string): Promise<SessionView> {
    const session = await this.api.openSession(decisionId);
    this.reconcile(session);
    this.rows = [];
    this.report = null;
    this.ran.clear();
    return session;
  }

  async refresh(): Promise<SessionView> {
    if (!this.session) throw new Error('no session open');
    const session = await this.api.getSession(this.session.session_id);
    this.reconcile(session);
    return session;
  }

  async loadSuite(): Promise<SuiteResponse> {
    if (!this.session) throw new Error('no session open');
    this.suite = await this.api.getSuite(this.session.session_id);
    return this.suite;
  }

  /** True when this exact change has already run: it would cost no query. */
  isCached(instance: InstanceView | InstancePayload): boolean {
    const remove = 'remove' in instance ? Boolean(instance.remove) : false;
    const substituted =
      'substituted_value' in instance ? instance.substituted_value : undefined;
    return this.ran.has(contentKey(instance.class_id, instance.field, substituted, remove));
  }

  async run(instance: InstancePayload): Promise<QueryView> {
    if (!this.session) throw new Error('no session open');
    const reply = await this.api.submitQuery(this.session.session_id, instance);
    this.reconcile(reply.session);
    this.lastReplayed = reply.replayed;
    this.ran.add(
      contentKey(
        instance.class_id,
        instance.field,
        instance.substituted_value,
        Boolean(instance.remove),
      ),
    );
    if (!reply.replayed) {
      this.rows = [...this.rows, reply.result];
    }
    return reply.result;
  }

  async close(): Promise<ReportView> {
    if (!this.session) throw new Error('no session open');
    const closed = await this.api.closeSession(this.session.session_id);
    this.report = closed.report;
    this.reconcile(await this.api.getSession(this.session.session_id));
    return closed.report;
  }

  /** Evidence export: the service's report bytes, passed through unmodified. */
  async exportReportBytes(): Promise<Uint8Array> {
    if (!this.session) throw new Error('no session open');
    return this.api.fetchReportBytes(this.session.session_id);
  }
}
