/**
 * Typed client for the interrogation service HTTP/JSON API.
 *
 * The portal consumes this API exclusively: every number shown in the UI
 * is echoed from a response body, never recomputed client-side. The fetch
 * implementation is injectable so view and store tests can run against
 * scripted responses.
 */

export type SessionStatus = 'open' | 'closed' | 'expired';
export type DecisionLabel = 'accept' | 'reject';
export type CriterionName =
  | 'outcome_crossing'
  | 'percentile_shift'
  | 'threshold_proximate'
  | 'pattern_consistent';

export interface SessionView {
  session_id: string;
  decision_id: string;
  requester_id: string;
  model_version: string;
  opened_at: string;
  window_deadline: string;
  budget_limit: number;
  queries_used: number;
  remaining_budget: number;
  state: SessionStatus;
  spoliation_flag: boolean;
  version_resolution: string;
  cross_app_billable: boolean;
  closed_at: string | null;
}

export interface InstanceView {
  instance_id: string;
  class_id: string;
  field: string;
  original_value: unknown;
  substituted_value: unknown;
  status: 'accepted' | 'custom_pending';
  label?: string;
  description?: string;
  rationale?: string;
}

export interface SuiteResponse {
  instances: InstanceView[];
  warnings: string[];
}

export interface OutcomeView {
  score: number;
  confidence: [number, number];
  percentile: number;
  label: DecisionLabel;
  model_version: string;
  evaluated_at: string;
}

export interface QueryView {
  instance: InstanceView;
  baseline: OutcomeView;
  perturbed: OutcomeView;
  score_delta: number;
  percentile_delta: number;
}

export interface FindingView {
  criterion: CriterionName;
  magnitude: number;
  supporting_results: string[];
  direction: 'toward_accept' | 'toward_reject';
  pending_adjudication: boolean;
  group_kind?: string;
}

export interface ReportView {
  schema: string;
  session_id: string;
  findings: FindingView[];
  queries: QueryView[];
  magnitudes: number[];
  plain_language: string[];
  spoliation_flag: boolean;
  budget_used: number;
  generated_at: string;
}

export interface QueryResponse {
  result: QueryView;
  replayed: boolean;
  session: SessionView;
}

export interface CloseResponse {
  report: ReportView;
  report_text: string;
  audit_extract: unknown[];
}

export interface InstancePayload {
  instance_id?: string;
  class_id: string;
  field: string;
  substituted_value?: unknown;
  remove?: boolean;
}

export interface ErrorEnvelope {
  code: string;
  message: string;
  retriable: boolean;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly envelope: ErrorEnvelope,
  ) {
    super(`${envelope.code}: ${envelope.message}`);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    readonly apiKey: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request(path: string, init: RequestInit = {}): Promise<Response> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, {
      ...init,
      headers: {
        'X-Api-Key': this.apiKey,
        'Content-Type': 'application/json',
        ...(init.headers ?? {}),
      },
    });
    if (!response.ok) {
      let envelope: ErrorEnvelope;
      try {
        envelope = (await response.json()) as ErrorEnvelope;
      } catch {
        envelope = { code: 'unknown_error', message: response.statusText, retriable: false };
      }
      throw new ApiError(response.status, envelope);
    }
    return response;
  }

  private async json<T>(path: string, init: RequestInit = {}): Promise<T> {
    return (await this.request(path, init)).json() as Promise<T>;
  }

  openSession(decisionId: string): Promise<SessionView> {
    return this.json('/sessions', {
      method: 'POST',
      body: JSON.stringify({ decision_id: decisionId }),
    });
  }

  getSession(sessionId: string): Promise<SessionView> {
    return this.json(`/sessions/${sessionId}`);
  }

  getSuite(sessionId: string): Promise<SuiteResponse> {
    return this.json(`/sessions/${sessionId}/suite`);
  }

  submitQuery(sessionId: string, instance: InstancePayload): Promise<QueryResponse> {
    return this.json(`/sessions/${sessionId}/queries`, {
      method: 'POST',
      body: JSON.stringify({ instance }),
    });
  }

  closeSession(sessionId: string): Promise<CloseResponse> {
    return this.json(`/sessions/${sessionId}/close`, { method: 'POST' });
  }

  /** Raw report bytes; exported verbatim so packages stay byte-identical. */
  async fetchReportBytes(sessionId: string): Promise<Uint8Array> {
    const response = await this.request(`/sessions/${sessionId}/report`);
    return new Uint8Array(await response.arrayBuffer());
  }
}
