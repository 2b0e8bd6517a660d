export interface SchemaFeature {
  name: string;
  cardinality: number;
}

export interface SchemaInfo {
  features: SchemaFeature[];
}

export type ReportStatus = "running" | "done" | "cancelled";

/** One gateway poll result; every displayed number comes from here verbatim. */
export interface ReportSnapshot {
  estimate: number;
  margin: number;
  fractionScanned: number;
  rowsMatched: number;
  status: ReportStatus;
}

export interface HistoryPoint {
  atMs: number;
  estimate: number;
  margin: number;
  fractionScanned: number;
}

/** Query body as the gateway expects it: feature name -> allowed values. */
export type QueryBody = Record<string, number[]>;
